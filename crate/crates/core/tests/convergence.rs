mod common;

use common::{random_matrix, rng};
use spantag::corpus::{Corpus, Document, SpanAnnotation};
use spantag::crf::{crf_gradients, CrfInstance, CrfParams};
use spantag::pipeline::{train, Optimizer, Resources, TrainConfig};
use spantag::tensor::Tensors;

#[test]
fn crf_gradient_vanishes_at_the_optimum() {
    let mut r = rng(8);
    let mut params = CrfParams::init(3, &mut r);
    let inst = CrfInstance {
        emissions: random_matrix(4, 3, 1.0, &mut r),
        gold: Some(vec![2, 0, 0, 1]),
    };
    let sigma = 1.0;
    let mut norm = f64::INFINITY;
    for _ in 0..5000 {
        let g = crf_gradients(&params, &inst, sigma).unwrap();
        norm = g.params.sq_norm().sqrt();
        params.add_scaled(0.2, &g.params);
    }
    assert!(norm < 1e-8, "gradient norm {norm}");
}

#[test]
fn single_sentence_loss_decreases_to_zero() {
    let doc = Document::new(
        "1",
        "pin trâu giá rẻ",
        vec![
            SpanAnnotation::new(0, 8, "BATTERY#POSITIVE".parse().unwrap()),
            SpanAnnotation::new(9, 15, "PRICE#POSITIVE".parse().unwrap()),
        ],
    )
    .unwrap();
    let corpus = Corpus::new("one", vec![doc]).unwrap();
    let cfg = TrainConfig {
        hidden: 6,
        syllable_dim: 6,
        char_embed_dim: 3,
        char_hidden: 3,
        dropout: 0.0,
        optimizer: Optimizer::Sgd,
        learning_rate: 0.05,
        epochs: 1000,
        seed: 3,
        ..TrainConfig::default()
    };
    let (_, report) = train(&corpus, &corpus, &cfg, &Resources::default()).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss / 4.0).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{losses:?}");
    assert!(*losses.last().unwrap() < 0.01, "final loss {}", losses.last().unwrap());
    assert_eq!(report.best_dev_f1, 1.0);
}
