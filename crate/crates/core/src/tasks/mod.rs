//! Sequence tasks, the curriculum, MNIST ingestion and character streams.

mod chars;
mod copy;
mod curriculum;
mod mnist;

pub use chars::{char_stream, CharStream, Vocab};
pub use copy::{
    bits_error, gen_copy, gen_repeat_copy, Episode, EpisodeStream, step_bits, StreamStep, TaskKind, BIT_WIDTH,
    INPUT_DIM, OUTPUT_DIM,
};
pub use curriculum::{Curriculum, CurriculumLevel, SOLVE_THRESHOLD_BITS};
pub use mnist::{load_idx_images, load_idx_labels, load_mnist, mnist_dir, MnistDataset, MnistSplit};
