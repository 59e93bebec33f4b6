use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Gradient;
use super::{DeepError, EncodedExample, Network, TrainConfig};
use crate::corpus::fisher_yates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub history: Vec<EpochStats>,
    /// Epoch (1-based) whose weights were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub config: TrainConfig,
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    em: Vec<f64>,
    ev: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(net: &Network, lr: f64, embeddings: bool) -> Self {
        let e = if embeddings { net.emb.len() } else { 0 };
        Self {
            lr,
            t: 0,
            m: vec![0.0; net.dense.len()],
            v: vec![0.0; net.dense.len()],
            em: vec![0.0; e],
            ev: vec![0.0; e],
        }
    }

    /// Dense Adam for the network body; embedding rows are updated lazily,
    /// only when they received a gradient in this step.
    fn step(&mut self, net: &mut Network, grad: &Gradient) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        };
        for (((p, m), v), &g) in net.dense.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(&grad.dense) {
            update(p, m, v, g);
        }
        if self.em.is_empty() {
            return;
        }
        let dim = net.dim();
        for (&row, g) in &grad.emb {
            let r = row * dim..(row + 1) * dim;
            for (((p, m), v), &g) in net.emb[r.clone()]
                .iter_mut()
                .zip(&mut self.em[r.clone()])
                .zip(&mut self.ev[r])
                .zip(g)
            {
                update(p, m, v, g);
            }
        }
    }
}

/// Seed for the dropout stream of one example in one epoch.
fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, index as u64] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

fn accuracy(net: &Network, examples: &[EncodedExample]) -> Result<f64, DeepError> {
    let probs = net.predict_batch(examples)?;
    let hits = probs
        .iter()
        .zip(examples)
        .filter(|(p, ex)| u8::from(**p >= 0.5) == ex.label)
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Minibatch training with Adam and early stopping on validation loss.
///
/// Per-example gradients are summed in fixed chunks of `grad_chunk`
/// examples (in parallel when enabled) and the chunk sums are reduced in
/// order, so the result does not depend on the number of threads.
pub fn train_model(
    mut net: Network,
    cfg: &TrainConfig,
    train: &[EncodedExample],
    val: &[EncodedExample],
) -> Result<TrainedModel, DeepError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DeepError::Training("empty training set".into()));
    }
    if train.iter().all(|e| e.label == train[0].label) {
        return Err(DeepError::Training("training set contains a single class".into()));
    }
    net.validate_examples(train)?;
    net.validate_examples(val)?;

    let mut adam = Adam::new(&net, cfg.learning_rate, cfg.fine_tune_embeddings);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        fisher_yates(&mut order, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts = crate::par::map_chunks(batch, cfg.grad_chunk, |chunk| {
                let mut g = Gradient::zeros(net.dense.len());
                let mut loss = 0.0;
                for &i in chunk {
                    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, epoch, i));
                    loss += net.example_grad(&train[i], Some(&mut rng), &mut g, cfg.fine_tune_embeddings);
                }
                (g, loss)
            });
            let mut grad = Gradient::zeros(net.dense.len());
            for (g, l) in &parts {
                grad.add(g);
                loss_sum += l;
            }
            grad.scale(1.0 / batch.len() as f64);
            if cfg.clip_norm > 0.0 {
                let n = grad.norm();
                if n > cfg.clip_norm {
                    grad.scale(cfg.clip_norm / n);
                }
            }
            adam.step(&mut net, &grad);
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            (Some(net.mean_loss(val)?), Some(accuracy(&net, val)?))
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if !train_loss.is_finite() {
            return Err(DeepError::Training(format!("loss diverged in epoch {epoch}")));
        }
        let Some(vl) = val_loss else { continue };
        match &best {
            Some((b, ..)) if vl >= *b => {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = epoch < cfg.epochs;
                    break;
                }
            }
            _ => {
                best = Some((vl, epoch, net.emb.clone(), net.dense.clone()));
                since_best = 0;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, emb, dense)) => {
            net.emb = emb;
            net.dense = dense;
            epoch
        }
        None => history.len(),
    };
    Ok(TrainedModel {
        network: net,
        history,
        best_epoch,
        stopped_early,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepmodels::{build_model, ArchConfig, EmbeddingTable, MODEL_SPECS};

    fn setup(spec: usize) -> (Network, Vec<EncodedExample>) {
        let rows = (0..6)
            .map(|i| {
                (
                    format!("w{i}"),
                    (0..4).map(|j| ((i * 5 + j) as f64).cos() * 0.5).collect(),
                )
            })
            .collect();
        let table = EmbeddingTable::from_vectors(4, rows, 1).unwrap();
        let arch = ArchConfig {
            lstm_hidden: 4,
            lstm_advanced_layers: 1,
            dropout: 0.1,
            cnn1_widths: vec![2],
            cnn1_filters: 4,
            cnn2_widths: vec![2],
            cnn2_filters: 4,
            cnn2_dense: 4,
        };
        let net = build_model(&MODEL_SPECS[spec], &table, &arch, 5).unwrap();
        let needs = net.needs_ratio();
        let data = (0..8)
            .map(|i| EncodedExample {
                tokens: vec![table.lookup("KOMMENTAR"), i % 6, (i + 1) % 6],
                ratio: needs.then_some(if i % 2 == 0 { 0.9 } else { 0.2 }),
                label: (i % 2) as u8,
            })
            .collect();
        (net, data)
    }

    #[test]
    fn zero_epochs_leave_weights_alone() {
        let (net, data) = setup(0);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_model(net.clone(), &cfg, &data, &[]).unwrap();
        assert_eq!(out.network, net);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn single_class_is_rejected() {
        let (net, mut data) = setup(0);
        data.iter_mut().for_each(|e| e.label = 1);
        assert!(matches!(
            train_model(net, &TrainConfig::default(), &data, &[]),
            Err(DeepError::Training(_))
        ));
    }

    #[test]
    fn loss_goes_down() {
        let (net, data) = setup(4);
        let before = net.mean_loss(&data).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let out = train_model(net, &cfg, &data, &[]).unwrap();
        assert!(out.network.mean_loss(&data).unwrap() < before);
        assert_eq!(out.history.len(), 30);
    }

    #[test]
    fn early_stopping_restores_best() {
        let (net, data) = setup(6);
        let (train, val) = data.split_at(6);
        let mut val = val.to_vec();
        val.iter_mut().for_each(|e| e.label = 1 - e.label);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            learning_rate: 0.05,
            patience: 2,
            ..TrainConfig::default()
        };
        let out = train_model(net, &cfg, train, &val).unwrap();
        let best = out
            .history
            .iter()
            .filter_map(|h| h.val_loss)
            .fold(f64::INFINITY, f64::min);
        let kept = out.network.mean_loss(&val).unwrap();
        assert!((kept - best).abs() < 1e-12);
        assert!(out.stopped_early);
    }
}
