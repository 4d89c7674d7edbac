//! Finite-difference gradient checks shared by the gradcheck and acceptance
//! targets. Each function returns the worst relative error over all points.

use cliperase::losses::{
    baseline_loss_and_grad, consistency_loss_and_grad, contrastive_loss_and_grad, contrastive_loss_with_mode,
    forgetting_loss_and_grad, total_unlearn_loss_and_grad, ContrastiveMode, LossWeights, Method,
};
use cliperase::model::DualEncoderModel;
use cliperase::{baseline_loss, consistency_loss, forgetting_loss, total_unlearn_loss};

use super::{grad_arch, grad_batches, grad_corpus, max_relative_error};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const FLOOR: f64 = 1e-8;
pub const POINTS: u64 = 10;

/// Worst error and where it happened: (error, point, parameter index).
pub type Worst = (f64, u64, usize);

fn worst_over_points(
    value: impl Fn(&DualEncoderModel, &DualEncoderModel) -> f64,
    grad: impl Fn(&DualEncoderModel, &DualEncoderModel) -> Vec<f64>,
) -> Worst {
    let mut worst = (0.0, 0, 0);
    for point in 0..POINTS {
        let model = DualEncoderModel::init(&grad_arch(), 100 + point).unwrap();
        let orig = DualEncoderModel::init(&grad_arch(), 900 + point).unwrap();
        let analytic = grad(&model, &orig);
        let (err, at) = max_relative_error(&model, |m| value(m, &orig), &analytic, STEP, FLOOR);
        if err > worst.0 {
            worst = (err, point, at);
        }
    }
    worst
}

pub fn contrastive(mode: ContrastiveMode) -> Worst {
    let corpus = grad_corpus();
    let (_, batch) = grad_batches(&corpus);
    worst_over_points(
        |m, _| {
            let img = m.encode_image(batch.images.view()).unwrap();
            let txt = m.encode_text(&batch.captions).unwrap();
            contrastive_loss_with_mode(&img, &txt, m.temperature(), mode).unwrap()
        },
        |m, _| contrastive_loss_and_grad(m, &batch, m.temperature(), mode).unwrap().1.to_flat(),
    )
}

pub fn forgetting() -> Worst {
    let corpus = grad_corpus();
    let (batch, _) = grad_batches(&corpus);
    worst_over_points(
        |m, _| {
            let img = m.encode_image(batch.images.view()).unwrap();
            let txt = m.encode_text(&batch.captions).unwrap();
            forgetting_loss(&img, &txt).unwrap()
        },
        |m, _| forgetting_loss_and_grad(m, &batch).unwrap().1.to_flat(),
    )
}

pub fn consistency() -> Worst {
    let corpus = grad_corpus();
    let (_, batch) = grad_batches(&corpus);
    worst_over_points(
        |m, o| consistency_loss(&o.snapshot(), m, batch.images.view(), &batch.captions).unwrap(),
        |m, o| consistency_loss_and_grad(&o.snapshot(), m, &batch).unwrap().1.to_flat(),
    )
}

pub fn total(weights: LossWeights) -> Worst {
    let corpus = grad_corpus();
    let (forget, retain) = grad_batches(&corpus);
    worst_over_points(
        |m, o| total_unlearn_loss(m, &o.snapshot(), &forget, &retain, weights, m.temperature()).unwrap().total,
        |m, o| {
            let orig = o.snapshot();
            total_unlearn_loss_and_grad(m, &orig, &forget, &retain, weights, m.temperature(), ContrastiveMode::ImageToText)
                .unwrap()
                .1
                .to_flat()
        },
    )
}

pub fn baseline(method: Method) -> Worst {
    let corpus = grad_corpus();
    let (forget, retain) = grad_batches(&corpus);
    worst_over_points(
        |m, o| baseline_loss(method, m, &o.snapshot(), &forget, &retain, m.temperature()).unwrap(),
        |m, o| {
            let orig = o.snapshot();
            baseline_loss_and_grad(method, m, &orig, &forget, &retain, m.temperature(), ContrastiveMode::ImageToText)
                .unwrap()
                .1
                .to_flat()
        },
    )
}
