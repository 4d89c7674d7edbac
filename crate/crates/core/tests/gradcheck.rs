//! Analytic gradients of every loss against central finite differences.

mod common;

use cliperase::losses::{contrastive_loss_and_grad, ContrastiveMode, LossWeights, Method};
use cliperase::model::DualEncoderModel;
use cliperase::contrastive_loss;

use common::grad::{self, Worst, TOLERANCE};
use common::*;

fn assert_close(name: &str, (err, point, at): Worst) {
    assert!(err < TOLERANCE, "{name}: point {point}, parameter {at}: relative error {err:e}");
}

#[test]
fn contrastive_gradient() {
    assert_close("contrastive", grad::contrastive(ContrastiveMode::ImageToText));
    assert_close("symmetric contrastive", grad::contrastive(ContrastiveMode::Symmetric));

    // value path agrees with the image→text default
    let corpus = grad_corpus();
    let (_, batch) = grad_batches(&corpus);
    let m = DualEncoderModel::init(&grad_arch(), 1).unwrap();
    let img = m.encode_image(batch.images.view()).unwrap();
    let txt = m.encode_text(&batch.captions).unwrap();
    let a = contrastive_loss(&img, &txt, m.temperature()).unwrap();
    let b = contrastive_loss_and_grad(&m, &batch, m.temperature(), ContrastiveMode::ImageToText).unwrap().0;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn forgetting_gradient() {
    assert_close("forgetting", grad::forgetting());
}

#[test]
fn consistency_gradient() {
    assert_close("consistency", grad::consistency());
}

#[test]
fn total_gradient() {
    assert_close("total", grad::total(LossWeights::new(0.7, 1.3, 2.0).unwrap()));
    assert_close("total, unit weights", grad::total(LossWeights::default()));
}

#[test]
fn baseline_gradients() {
    for method in [Method::Ga, Method::Graddiff, Method::Klmin] {
        assert_close(method.name(), grad::baseline(method));
    }
}
