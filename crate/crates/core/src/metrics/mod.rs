//! Segmentation, distribution and structure metrics.

mod confusion;
mod distance;
mod fid;
mod ood;
mod table;

pub use confusion::ConfusionMatrix;
pub use distance::{masked_rmse, Region};
pub use fid::{fid, symmetric_eigen, EmbeddingSet};
pub use ood::{clip_acc, gradnorm_score, overlap_area, DEFAULT_BINS};
pub use table::{combo_table, drop_table, ComboTable, DropRow, DropTable};
