//! Fusion-branch training on precomputed backbone features, and the
//! autoencoder reconstruction loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{reconstruction_loss, Backbone, FeatureMap, ImageTensor};
use crate::data::{box_mask, BBox, Sample, TextEmbedding, TextStub};
use crate::error::{Error, Result};
use crate::fusion::{bce_loss, FusionModel, GuidanceMap};
use crate::nn::Binder;
use crate::optim::{AdamW, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamW,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            adam: AdamW::default(),
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

/// One training example with frozen features.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: Vec<FeatureMap>,
    pub text: TextEmbedding,
    pub mask: Vec<f64>,
    pub gt_box: BBox,
}

/// Encodes every sample once; the backbone stays frozen during fusion
/// training.
pub fn prepare(backbone: &Backbone, store: &ParamStore, samples: &[Sample], stub: &TextStub) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let (_, features) = backbone.encode_image(store, &s.image)?;
            let (h2, w2) = (features[1].h, features[1].w);
            Ok(Example {
                mask: box_mask(&s.gt_box, h2, w2),
                text: stub.embed(&s.caption)?,
                features,
                gt_box: s.gt_box,
            })
        })
        .collect()
}

fn forward_loss<'t>(model: &FusionModel, cx: &Binder<'t>, ex: &Example) -> Result<Var<'t>> {
    let tape = cx.tape();
    let vars: Vec<Var<'t>> = ex.features.iter().map(|f| tape.constant(f.data.clone())).collect();
    let sides: Vec<(usize, usize)> = ex.features.iter().map(|f| (f.h, f.w)).collect();
    let out = model.forward(cx, &vars, &sides, &ex.text)?;
    Ok(bce_loss(out.relevance, out.side, &ex.mask, sides[1]))
}

/// Loss of one example under the current parameters.
pub fn example_loss(model: &FusionModel, store: &ParamStore, ex: &Example) -> Result<f64> {
    let tape = Tape::new();
    let cx = Binder::frozen(&tape, store);
    Ok(forward_loss(model, &cx, ex)?.value().data()[0])
}

/// Visiting order of `epoch`, a function of the seed and epoch only so a
/// resumed run replays the same sequence.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One epoch of mini-batch AdamW over the fusion parameters. Returns the
/// mean pre-update loss.
pub fn train_epoch(
    model: &FusionModel,
    store: &mut ParamStore,
    examples: &[Example],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let bs = cfg.batch_size.max(1);
    let mut adam = cfg.adam;
    adam.lr *= cfg.lr_decay.powi(epoch as i32);
    let order = epoch_order(cfg.seed, epoch, examples.len());
    let mut total = 0.0;
    for batch in order.chunks(bs) {
        store.zero_grads();
        let mut grads = Vec::new();
        for &i in batch {
            let tape = Tape::new();
            let cx = Binder::new(&tape, store, FusionModel::is_param);
            let loss = forward_loss(model, &cx, &examples[i])?;
            let l = loss.value().data()[0];
            if !l.is_finite() {
                return Err(Error::Numeric(format!("training loss at epoch {}", epoch + 1)));
            }
            total += l;
            let g = tape.backward(loss)?;
            grads.extend(cx.param_grads(&g));
        }
        let scale = 1.0 / batch.len() as f64;
        for (id, g) in grads {
            store.accumulate_grad(id, &g.scale(scale));
        }
        store.step(&adam, FusionModel::is_param)?;
    }
    Ok(total / examples.len() as f64)
}

/// Guidance map of one example.
pub fn guidance(model: &FusionModel, store: &ParamStore, ex: &Example) -> Result<GuidanceMap> {
    Ok(model.fusion_forward(store, &ex.features, &ex.text)?.0)
}

/// Reconstruction training of the patch embedding, patch-expanding head and
/// decoder. Returns the mean loss per epoch.
pub fn train_autoencoder(
    backbone: &Backbone,
    store: &mut ParamStore,
    images: &[ImageTensor],
    cfg: &TrainConfig,
    kl_weight: f64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut adam = cfg.adam;
        adam.lr *= cfg.lr_decay.powi(epoch as i32);
        let mut total = 0.0;
        for batch in epoch_order(cfg.seed, epoch, images.len()).chunks(cfg.batch_size.max(1)) {
            store.zero_grads();
            let mut grads = Vec::new();
            for &i in batch {
                let tape = Tape::new();
                let cx = Binder::new(&tape, store, Backbone::is_reconstruction_param);
                let loss = reconstruction_loss(backbone, &cx, &images[i], kl_weight)?;
                let l = loss.value().data()[0];
                if !l.is_finite() {
                    return Err(Error::Numeric("reconstruction loss".into()));
                }
                total += l;
                let g = tape.backward(loss)?;
                grads.extend(cx.param_grads(&g));
            }
            let scale = 1.0 / batch.len() as f64;
            for (id, g) in grads {
                store.accumulate_grad(id, &g.scale(scale));
            }
            store.step(&adam, Backbone::is_reconstruction_param)?;
        }
        let mean = total / images.len().max(1) as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, StageConfig};
    use crate::data::generate_scenes;
    use crate::fusion::FusionConfig;

    fn tiny() -> (ParamStore, Backbone, FusionModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            stages: StageConfig {
                layers: [1, 1, 1, 1],
                window: 7,
                heads: [1, 1, 2, 2],
                channels: [8, 16, 32, 64],
            },
            factor: 4,
            latent_channels: 2,
            decoder_layers: 1,
        };
        let b = Backbone::new(&mut store, cfg, &mut rng).unwrap();
        let f = FusionModel::new(&mut store, FusionConfig::default(), [8, 16, 32, 64], [1, 1, 2, 2], &mut rng).unwrap();
        (store, b, f)
    }

    #[test]
    fn epoch_order_is_a_permutation_and_reproducible() {
        let a = epoch_order(3, 1, 10);
        assert_eq!(a, epoch_order(3, 1, 10));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(3, 2, 10));
    }

    #[test]
    fn training_updates_only_fusion_and_lowers_loss() {
        let (mut store, b, f) = tiny();
        let scenes = generate_scenes(1, 4, 64, 1, 2).unwrap();
        let samples: Vec<_> = scenes.iter().map(|s| s.sample()).collect();
        let ex = prepare(&b, &store, &samples, &TextStub::default()).unwrap();
        let backbone_before: Vec<_> = store.ids_with_prefix("backbone.").map(|id| store.value(id).clone()).collect();
        let cfg = TrainConfig {
            adam: AdamW {
                lr: 3e-3,
                ..AdamW::default()
            },
            ..TrainConfig::default()
        };
        let first = train_epoch(&f, &mut store, &ex, &cfg, 0).unwrap();
        let mut last = first;
        for e in 1..5 {
            last = train_epoch(&f, &mut store, &ex, &cfg, e).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
        let backbone_after: Vec<_> = store.ids_with_prefix("backbone.").map(|id| store.value(id).clone()).collect();
        assert_eq!(backbone_before, backbone_after);
    }

    #[test]
    fn autoencoder_loss_decreases() {
        let (mut store, b, _) = tiny();
        let scenes = generate_scenes(2, 2, 32, 1, 2).unwrap();
        let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            adam: AdamW {
                lr: 3e-3,
                ..AdamW::default()
            },
            ..TrainConfig::default()
        };
        let frozen: Vec<_> = store.ids_with_prefix("backbone.stage").map(|id| store.value(id).clone()).collect();
        let losses = train_autoencoder(&b, &mut store, &images, &cfg, 1e-6, |_, _| {}).unwrap();
        assert!(losses[3] < losses[0], "{losses:?}");
        let after: Vec<_> = store.ids_with_prefix("backbone.stage").map(|id| store.value(id).clone()).collect();
        assert_eq!(frozen, after);
    }
}
