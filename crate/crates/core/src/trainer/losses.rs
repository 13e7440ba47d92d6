use dsit_tensor::Var;

use super::TrainError;

/// Mean per-sample prediction entropy, `−(1/B) Σ_i Σ_k p_ik log p_ik`.
pub fn im_loss<'t>(task_logits: Var<'t>) -> Result<Var<'t>, TrainError> {
    let b = task_logits.shape()[0] as f64;
    let p = task_logits.softmax()?;
    let log_p = task_logits.log_softmax()?;
    Ok(p.mul(log_p)?.sum()?.scale(-1.0 / b)?)
}

/// Negative entropy of the batch-mean prediction, `Σ_k p̄_k log p̄_k`.
/// Minimal (−log K) when predictions are balanced across classes.
pub fn div_loss<'t>(task_logits: Var<'t>) -> Result<Var<'t>, TrainError> {
    let mean = task_logits.softmax()?.mean_rows()?;
    Ok(mean.mul(mean.log()?)?.sum()?)
}
