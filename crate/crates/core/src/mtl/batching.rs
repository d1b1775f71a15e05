use crate::error::{contract, Error, Result};
use crate::heads::TaskId;
use crate::numerics::RngState;

/// Indices of examples from a single task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    pub task: TaskId,
    pub examples: Vec<usize>,
}

/// Shuffles the example indices `0..n_examples` and chunks them into
/// batches of at most `batch_size`.
pub fn pack_batches(task: &TaskId, n_examples: usize, batch_size: usize, rng: &mut RngState) -> Result<Vec<MiniBatch>> {
    if n_examples == 0 {
        return Err(Error::Data(format!("task {task} has no training examples")));
    }
    if batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|c| MiniBatch {
            task: task.clone(),
            examples: c.to_vec(),
        })
        .collect())
}

/// Concatenates per-task batch lists and shuffles the result.
pub fn merge_shuffle(lists: Vec<Vec<MiniBatch>>, rng: &mut RngState) -> Vec<MiniBatch> {
    let mut all: Vec<MiniBatch> = lists.into_iter().flatten().collect();
    rng.shuffle(&mut all);
    all
}

/// `Σ_t ceil(|D_t| / batch_size)`.
pub fn steps_per_epoch(sizes: impl IntoIterator<Item = usize>, batch_size: usize) -> usize {
    sizes.into_iter().map(|n| n.div_ceil(batch_size)).sum()
}
