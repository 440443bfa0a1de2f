//! End-to-end model and the command implementations behind the CLI.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeatureMap, ImageTensor};
use crate::checkpoint::{self, Named};
use crate::config::RunConfig;
use crate::data::{self, BBox, EvalReport, Sample, TextEmbedding, TextStub};
use crate::error::{Error, Result};
use crate::fusion::{spatial_mass, FusionModel, GuidanceMap};
use crate::guidance::{self, DenoiserConfig, NoiseSchedule, SampleResult, ToyDenoiser};
use crate::imageio;
use crate::nn::Binder;
use crate::autodiff::{Tape, Var};
use crate::optim::{AdamW, ParamStore};
use crate::tensor::Tensor;
use crate::train::{self, Example};

/// Command-line ablation switches layered over a config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dfa_stages: Option<[bool; 3]>,
    pub no_offsets: bool,
    pub no_scalar: bool,
    pub no_card: bool,
    pub no_guidance: bool,
    pub no_activation: bool,
    pub no_dilation: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.dfa_stages {
            cfg.fusion.dfa_enabled = m;
        }
        cfg.fusion.no_offsets |= self.no_offsets;
        cfg.fusion.no_scalar |= self.no_scalar;
        cfg.fusion.no_card |= self.no_card;
        if self.no_guidance {
            cfg.guidance.enabled = false;
        }
        if self.no_activation {
            cfg.guidance.activation = false;
        }
        if self.no_dilation {
            cfg.guidance.dilation = guidance::Dilation::None;
        }
    }
}

pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fusion: FusionModel,
    pub denoiser: ToyDenoiser,
    pub schedule: NoiseSchedule,
    pub stub: TextStub,
    /// Completed fusion epochs.
    pub epochs_done: usize,
    /// Completed denoiser updates.
    pub denoiser_steps: usize,
}

impl Model {
    /// Fresh seeded weights.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.backbone.clone(), &mut rng)?;
        let s = &cfg.backbone.stages;
        let fusion = FusionModel::new(&mut store, cfg.fusion.clone(), s.channels, s.heads, &mut rng)?;
        let dcfg = DenoiserConfig {
            latent_channels: cfg.backbone.latent_channels,
            ..cfg.diffusion.denoiser.clone()
        };
        let denoiser = ToyDenoiser::new(&mut store, dcfg, &mut rng)?;
        Ok(Self {
            schedule: guidance::build_noise_schedule(cfg.diffusion.steps)?,
            cfg,
            store,
            backbone,
            fusion,
            denoiser,
            stub: TextStub::default(),
            epochs_done: 0,
            denoiser_steps: 0,
        })
    }

    pub fn to_tensors(&self) -> Named {
        let f = &self.cfg.fusion;
        let flag = |b: bool| Tensor::scalar(b as u8 as f64);
        let mut out = vec![
            ("meta.config".to_string(), checkpoint::text_tensor(&self.cfg.to_text())),
            ("meta.epoch".to_string(), Tensor::scalar(self.epochs_done as f64)),
            ("meta.denoiser_steps".to_string(), Tensor::scalar(self.denoiser_steps as f64)),
            ("meta.no_offsets".to_string(), flag(f.no_offsets)),
            ("meta.no_scalar".to_string(), flag(f.no_scalar)),
            ("meta.no_card".to_string(), flag(f.no_card)),
            (
                "meta.dfa_stages".to_string(),
                Tensor::new(&[3], f.dfa_enabled.map(|b| b as u8 as f64).to_vec()).expect("three flags"),
            ),
        ];
        out.extend(checkpoint::store_tensors(&self.store, true));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn from_tensors(tensors: &Named) -> Result<Self> {
        let text = tensors
            .iter()
            .find(|(n, _)| n == "meta.config")
            .ok_or_else(|| Error::Format("checkpoint lacks meta.config".into()))?;
        let cfg = RunConfig::parse(&checkpoint::tensor_text(&text.1)?).map_err(|e| Error::Format(format!("stored config: {e}")))?;
        let mut model = Self::new(cfg)?;
        checkpoint::restore_store(&mut model.store, tensors)?;
        model.epochs_done = checkpoint::meta_value(tensors, "epoch").unwrap_or(0.0) as usize;
        model.denoiser_steps = checkpoint::meta_value(tensors, "denoiser_steps").unwrap_or(0.0) as usize;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }

    /// Takes runtime settings (seed, sampling and guidance) from `cfg` and
    /// layers the ablation switches over the stored fusion config.
    pub fn configure_runtime(&mut self, cfg: &RunConfig, ov: &Overrides) -> Result<()> {
        self.cfg.seed = cfg.seed;
        self.cfg.guidance = cfg.guidance.clone();
        self.cfg.diffusion.steps = cfg.diffusion.steps;
        let mut c = self.cfg.clone();
        ov.apply(&mut c);
        c.validate()?;
        self.schedule = guidance::build_noise_schedule(c.diffusion.steps)?;
        self.fusion.cfg = c.fusion.clone();
        self.cfg = c;
        Ok(())
    }

    pub fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        self.stub.embed(caption)
    }

    pub fn features(&self, img: &ImageTensor) -> Result<(Tensor, Vec<FeatureMap>)> {
        self.backbone.encode_image(&self.store, img)
    }

    pub fn guidance_map(&self, img: &ImageTensor, caption: &str) -> Result<GuidanceMap> {
        let (_, features) = self.features(img)?;
        Ok(self.fusion.fusion_forward(&self.store, &features, &self.embed(caption)?)?.0)
    }

    pub fn predict_box(&self, img: &ImageTensor, caption: &str) -> Result<BBox> {
        self.guidance_map(img, caption)?.predicted_box(self.cfg.guidance.beta_frac)
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let d = &cfg.data;
    let scenes = data::generate_scenes(cfg.seed, d.scenes, d.side, d.min_objects, d.max_objects)?;
    data::write_dataset(out, &scenes)?;
    Ok(scenes.len())
}

/// Fusion training (after optional reconstruction training) followed by
/// the denoiser's noise-prediction training. `log` receives one-based
/// epoch numbers and mean losses.
pub fn train(model: &mut Model, samples: &[Sample], mut log: impl FnMut(usize, f64)) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cfg = model.cfg.clone();
    if model.epochs_done == 0 && cfg.ae_epochs > 0 {
        let images: Vec<ImageTensor> = samples.iter().map(|s| s.image.clone()).collect();
        let ae = train::TrainConfig {
            epochs: cfg.ae_epochs,
            ..cfg.train.clone()
        };
        train::train_autoencoder(&model.backbone, &mut model.store, &images, &ae, cfg.kl_weight, |_, _| {})?;
    }
    let mut examples: Vec<Example> = Vec::with_capacity(samples.len());
    let mut latents = Vec::with_capacity(samples.len());
    for s in samples {
        let (latent, features) = model.features(&s.image)?;
        let text = model.embed(&s.caption)?;
        let (h2, w2) = (features[1].h, features[1].w);
        let (lh, lw) = (latent.shape()[0], latent.shape()[1]);
        latents.push((
            latent.reshape(&[lh * lw, cfg.backbone.latent_channels])?,
            ToyDenoiser::text_tokens(&text)?,
            (lh, lw),
        ));
        examples.push(Example {
            mask: data::box_mask(&s.gt_box, h2, w2),
            text,
            features,
            gt_box: s.gt_box,
        });
    }
    for epoch in model.epochs_done..cfg.train.epochs {
        let loss = train::train_epoch(&model.fusion, &mut model.store, &examples, &cfg.train, epoch)?;
        model.epochs_done = epoch + 1;
        log(epoch + 1, loss);
    }
    let remaining = cfg.diffusion.train_steps.saturating_sub(model.denoiser_steps);
    if remaining > 0 {
        let side = latents[0].2;
        let pairs: Vec<(Tensor, Tensor)> = latents
            .into_iter()
            .filter(|l| l.2 == side)
            .map(|(z, la, _)| (z, la))
            .collect();
        let adam = AdamW {
            lr: cfg.diffusion.lr,
            ..cfg.train.adam
        };
        let seed = cfg.seed ^ 0xD1FF_u64.wrapping_mul(model.denoiser_steps as u64 + 1);
        guidance::train_denoiser(&model.denoiser, &mut model.store, &pairs, side, &model.schedule, remaining, &adam, seed)?;
        model.denoiser_steps += remaining;
    }
    Ok(())
}

pub struct RunOutput {
    pub image: ImageTensor,
    pub guidance: GuidanceMap,
    pub sample: SampleResult,
}

/// Encodes the image, extracts G, runs guided sampling from the
/// forward-noised latent and decodes the result.
pub fn run(model: &Model, img: &ImageTensor, caption: &str) -> Result<RunOutput> {
    let (latent, features) = model.features(img)?;
    let text = model.embed(caption)?;
    let (g, _) = model.fusion.fusion_forward(&model.store, &features, &text)?;
    let (lh, lw, ct) = (latent.shape()[0], latent.shape()[1], latent.shape()[2]);
    let mask = match guidance::guidance_mask(&g, lh, lw, &model.cfg.guidance) {
        Ok(m) => m,
        Err(Error::GuidanceEmpty { .. }) if !model.cfg.guidance.enabled => vec![1.0; lh * lw],
        Err(e) => return Err(e),
    };
    let la = ToyDenoiser::text_tokens(&text)?;
    let z0 = latent.reshape(&[lh * lw, ct])?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
    let z_t = guidance::noise_latent(&z0, model.schedule.steps(), &model.schedule, &mut rng);
    let sample = guidance::sample_with_guidance(
        &model.denoiser,
        &model.store,
        &z_t,
        (lh, lw),
        &la,
        &mask,
        &model.schedule,
        &model.cfg.guidance,
        model.cfg.seed.wrapping_add(1),
    )?;
    let image = model
        .backbone
        .decode_latent(&model.store, &sample.latent.clone().reshape(&[lh, lw, ct])?)?;
    Ok(RunOutput {
        image,
        guidance: g,
        sample,
    })
}

/// Writes `output.ppm`, `guidance.pgm` and `trace.tsv` into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = vec![dir.join("output.ppm"), dir.join("guidance.pgm"), dir.join("trace.tsv")];
    imageio::write_ppm(&paths[0], &out.image)?;
    imageio::write_pgm(&paths[1], out.guidance.h, out.guidance.w, &out.guidance.data)?;
    imageio::write_atomic(&paths[2], guidance::trace_tsv(&out.sample.trace).as_bytes())?;
    Ok(paths)
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let preds = samples
        .iter()
        .map(|s| model.predict_box(&s.image, &s.caption))
        .collect::<Result<Vec<_>>>()?;
    data::evaluate_batch(samples, &preds)
}

/// Per-head and head-averaged spatial attention mass of one stage.
pub struct AttentionDump {
    pub h: usize,
    pub w: usize,
    pub heads: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

pub fn attention_maps(model: &Model, img: &ImageTensor, caption: &str, stage: usize) -> Result<AttentionDump> {
    if !(1..=4).contains(&stage) {
        return Err(Error::Usage(format!("stage must lie in 1..4, got {stage}")));
    }
    let (_, features) = model.features(img)?;
    let text = model.embed(caption)?;
    let tape = Tape::new();
    let cx = Binder::frozen(&tape, &model.store);
    let vars: Vec<Var<'_>> = features.iter().map(|f| tape.constant(f.data.clone())).collect();
    let sides: Vec<(usize, usize)> = features.iter().map(|f| (f.h, f.w)).collect();
    let out = model.fusion.forward(&cx, &vars, &sides, &text)?;
    let t_s = text.spatial.len();
    let (h, w) = sides[stage - 1];
    let heads: Vec<Vec<f64>> = out.stages[stage - 1]
        .attention
        .iter()
        .map(|a| spatial_mass(std::slice::from_ref(a), t_s).value().data().to_vec())
        .collect();
    let mut mean = vec![0.0; h * w];
    for m in &heads {
        for (acc, v) in mean.iter_mut().zip(m) {
            *acc += v / heads.len() as f64;
        }
    }
    Ok(AttentionDump { h, w, heads, mean })
}

/// Writes `stage{s}_head{k}.pgm` per head and `stage{s}_mean.pgm`.
pub fn write_attention(dir: &Path, stage: usize, dump: &AttentionDump) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (k, m) in dump.heads.iter().enumerate() {
        let p = dir.join(format!("stage{stage}_head{}.pgm", k + 1));
        imageio::write_pgm(&p, dump.h, dump.w, m)?;
        paths.push(p);
    }
    let p = dir.join(format!("stage{stage}_mean.pgm"));
    imageio::write_pgm(&p, dump.h, dump.w, &dump.mean)?;
    paths.push(p);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.side = 64;
        cfg.data.scenes = 4;
        cfg.backbone.stages.channels = [8, 16, 32, 64];
        cfg.backbone.stages.heads = [1, 1, 2, 2];
        cfg.backbone.stages.layers = [1, 1, 1, 1];
        cfg.backbone.latent_channels = 2;
        cfg.train.epochs = 2;
        cfg.train.adam.lr = 2e-3;
        cfg.diffusion.steps = 6;
        cfg.guidance.guided_steps = 3;
        cfg.diffusion.train_steps = 5;
        cfg.diffusion.denoiser.hidden = 8;
        cfg
    }

    fn samples(cfg: &RunConfig) -> Vec<Sample> {
        data::generate_scenes(cfg.seed, cfg.data.scenes, cfg.data.side, 1, 2)
            .unwrap()
            .iter()
            .map(|s| s.sample())
            .collect()
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = small_config();
        let data = samples(&cfg);
        let mut full = Model::new(cfg.clone()).unwrap();
        let mut losses = Vec::new();
        train(&mut full, &data, |_, l| losses.push(l)).unwrap();
        let mut half_cfg = cfg.clone();
        half_cfg.train.epochs = 1;
        let mut half = Model::new(half_cfg).unwrap();
        train(&mut half, &data, |_, _| {}).unwrap();
        let mut resumed = Model::from_tensors(&half.to_tensors()).unwrap();
        resumed.cfg.train.epochs = 2;
        let mut second = Vec::new();
        train(&mut resumed, &data, |_, l| second.push(l)).unwrap();
        assert_eq!(second.len(), 1);
        assert_eq!(second[0].to_bits(), losses[1].to_bits());
        let back = Model::from_tensors(&full.to_tensors()).unwrap();
        assert_eq!(back.store.checksum(), full.store.checksum());
        assert_eq!(back.epochs_done, 2);
    }

    #[test]
    fn ablation_flags_are_recorded() {
        let mut cfg = small_config();
        Overrides {
            no_offsets: true,
            ..Overrides::default()
        }
        .apply(&mut cfg);
        let m = Model::new(cfg).unwrap();
        let t = m.to_tensors();
        assert_eq!(checkpoint::meta_value(&t, "no_offsets"), Some(1.0));
        assert_eq!(checkpoint::meta_value(&t, "no_card"), Some(0.0));
        assert!(Model::from_tensors(&t).unwrap().cfg.fusion.no_offsets);
    }

    #[test]
    fn run_shapes_and_no_guidance() {
        let mut cfg = small_config();
        let m = Model::new(cfg.clone()).unwrap();
        let s = &samples(&cfg)[0];
        let out = run(&m, &s.image, &s.caption).unwrap();
        assert_eq!((out.image.height, out.image.width), (64, 64));
        assert_eq!((out.guidance.h, out.guidance.w), (2, 2));
        assert_eq!(out.sample.guided_steps, 3);
        cfg.guidance.enabled = false;
        let m = Model::new(cfg).unwrap();
        assert_eq!(run(&m, &s.image, &s.caption).unwrap().sample.guided_steps, 0);
    }

    #[test]
    fn attention_dump_mean() {
        let cfg = small_config();
        let m = Model::new(cfg.clone()).unwrap();
        let s = &samples(&cfg)[0];
        let d = attention_maps(&m, &s.image, &s.caption, 4).unwrap();
        assert_eq!(d.heads.len(), 2);
        assert_eq!((d.h, d.w), (2, 2));
        assert!(matches!(attention_maps(&m, &s.image, &s.caption, 5), Err(Error::Usage(_))));
    }
}
