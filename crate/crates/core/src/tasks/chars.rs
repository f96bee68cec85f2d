use crate::error::{Error, Result};

/// Byte vocabulary: the sorted distinct bytes of a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<u8>,
    index: [Option<u16>; 256],
}

impl Vocab {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut seen = [false; 256];
        bytes.iter().for_each(|&b| seen[b as usize] = true);
        let symbols: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut index = [None; 256];
        for (i, &b) in symbols.iter().enumerate() {
            index[b as usize] = Some(i as u16);
        }
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn encode(&self, b: u8) -> Option<usize> {
        self.index[b as usize].map(usize::from)
    }
}

/// Next-character prediction pairs `(current, next)` as vocabulary indices.
#[derive(Clone, Debug)]
pub struct CharStream {
    ids: Vec<usize>,
    pos: usize,
}

impl Iterator for CharStream {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let pair = (*self.ids.get(self.pos)?, *self.ids.get(self.pos + 1)?);
        self.pos += 1;
        Some(pair)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.ids.len().saturating_sub(self.pos + 1);
        (n, Some(n))
    }
}

impl ExactSizeIterator for CharStream {}

pub fn char_stream(bytes: &[u8], vocab: &Vocab) -> Result<CharStream> {
    let ids = bytes
        .iter()
        .map(|&b| {
            vocab
                .encode(b)
                .ok_or_else(|| Error::Format(format!("byte {b:#04x} missing from vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CharStream { ids, pos: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ab_gives_one_pair() {
        let v = Vocab::from_bytes(b"ab");
        let pairs: Vec<_> = char_stream(b"ab", &v).unwrap().collect();
        assert_eq!(pairs, vec![(0, 1)]);
    }

    #[test]
    fn vocab_is_sorted_unique() {
        let v = Vocab::from_bytes(b"banana!");
        assert_eq!(v.symbols(), b"!abn");
        assert_eq!(v.encode(b'n'), Some(3));
        assert_eq!(v.encode(b'z'), None);
    }

    #[test]
    fn length_is_len_minus_one() {
        let text = b"hello world";
        let s = char_stream(text, &Vocab::from_bytes(text)).unwrap();
        assert_eq!(s.len(), text.len() - 1);
        assert_eq!(char_stream(b"", &Vocab::from_bytes(b"")).unwrap().count(), 0);
        assert!(char_stream(b"x", &Vocab::from_bytes(b"y")).is_err());
    }
}
