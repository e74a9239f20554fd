use super::loss::{compute_loss, LossConfig, Target};
use super::model::Model;
use crate::error::{Error, Result};
use crate::nn::{Adam, Module};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
}

/// Loss of `model` on a batch without touching any state.
pub fn evaluate_loss<T: Real>(
    model: &Model<T>,
    batch: &Tensor<T>,
    targets: &[Target],
    loss_cfg: &LossConfig,
) -> Result<StepStats> {
    let preds = model.forward(batch)?;
    let out = compute_loss(&preds, targets, &model.config, loss_cfg)?;
    Ok(StepStats {
        step: 0,
        loss: out.total,
        box_loss: out.box_loss,
        obj_loss: out.obj_loss,
        cls_loss: out.cls_loss,
    })
}

/// One Adam step on `batch`. Returns the loss before the update.
///
/// A non-finite loss or gradient aborts the step with parameters and optimizer
/// state exactly as they were.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optimizer: &mut Adam<T>,
    batch: &Tensor<T>,
    targets: &[Target],
    loss_cfg: &LossConfig,
) -> Result<StepStats> {
    model.visit_params_mut("", &mut |_, t| t.clear_grad());
    let (preds, cache) = model.forward_train(batch)?;
    let out = compute_loss(&preds, targets, &model.config, loss_cfg)?;
    if !out.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "loss at step {} (box {}, obj {}, cls {})",
                optimizer.step + 1,
                out.box_loss,
                out.obj_loss,
                out.cls_loss
            ),
        });
    }
    model.backward(&cache, &out.grads)?;
    let mut bad = None;
    model.visit_params("", &mut |name, t| {
        if bad.is_none() && t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        model.visit_params_mut("", &mut |_, t| t.clear_grad());
        return Err(Error::NonFinite {
            context: format!("gradient of {name} at step {}", optimizer.step + 1),
        });
    }
    optimizer.update(model);
    model.visit_params_mut("", &mut |_, t| t.clear_grad());
    Ok(StepStats {
        step: optimizer.step,
        loss: out.total,
        box_loss: out.box_loss,
        obj_loss: out.obj_loss,
        cls_loss: out.cls_loss,
    })
}
