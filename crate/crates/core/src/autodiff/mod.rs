//! Reverse-mode gradients, the Adam optimiser and the likelihood training loop.

pub mod adam;
pub mod flow_tape;
pub mod tape;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use flow_tape::{flow_inverse_on_tape, flow_log_density_on_tape, std_normal_log_pdf_on_tape};
pub use tape::{Gradients, Tape, Var};
pub use train::{
    epoch_permutation, load_checkpoint, nll_and_grad, nll_loss, read_loss_csv, resume, save_checkpoint, train,
    write_loss_csv, Checkpoint, LrSchedule, Records, TrainConfig, TrainError, Trainable,
};
