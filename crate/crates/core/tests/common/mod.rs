#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smd::batch::TrainBatch;
use smd::nn::Ctx;
use smd::schedules::{plan_first_channel, plan_residual, MaskPlan};
use smd::training::{batch_losses_with_masks, BatchLosses};
use smd::data_synth::{Corpus, CorpusPlan, CorpusSpec};
use smd::duration_model::AttentionBlockConfig;
use smd::nn::{ConformerConfig, FftStackConfig};
use smd::smd_model::{ModelConfig, SmdModel};

pub fn tiny_spec() -> CorpusSpec {
    CorpusSpec {
        phoneme_vocab_size: 6,
        num_speakers: 3,
        num_channels: 3,
        codebook_size: 8,
        max_duration: 3,
        ..CorpusSpec::default()
    }
}

pub fn tiny_corpus(n: usize, seed: u64) -> Corpus {
    let plan = CorpusPlan {
        num_utterances: n,
        min_phonemes: 4,
        max_phonemes: 6,
    };
    Corpus::generate(&tiny_spec(), &plan, seed).unwrap()
}

pub fn tiny_config(spec: &CorpusSpec) -> ModelConfig {
    let dim = 8;
    let fft = FftStackConfig {
        layers: 1,
        heads: 2,
        filter: 8,
        kernel: 3,
    };
    let dur = AttentionBlockConfig {
        hidden: dim,
        heads: 2,
        layers: 1,
        kernel: 3,
    };
    ModelConfig {
        dim,
        prompt_text_encoder: fft,
        text_encoder: fft,
        prompt_encoder: fft,
        duration_extractor: dur,
        duration_predictor: dur,
        prompt_duration_encoder: fft,
        cross_attention_heads: 2,
        conformer: ConformerConfig {
            layers: 1,
            heads: 2,
            linear_units: 8,
            kernel: 3,
            dropout: 0.0,
        },
        ..ModelConfig::desk(spec)
    }
}

pub fn tiny_model(dtype: DType, seed: u64) -> SmdModel {
    SmdModel::init(&tiny_config(&tiny_spec()), dtype, ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum Which {
    Dur,
    PromptDur,
    Smd,
}

pub fn pick(l: &BatchLosses, which: Which) -> Tensor {
    match which {
        Which::Dur => l.l_dur.clone(),
        Which::PromptDur => l.l_promptdur.clone(),
        Which::Smd => (&l.l_smd_1 + &l.l_smd_j).unwrap(),
    }
}

pub struct Fixture {
    pub model: SmdModel,
    pub batch: TrainBatch,
    pub first: MaskPlan,
    pub residual: MaskPlan,
}

impl Fixture {
    pub fn new() -> Self {
        let corpus = tiny_corpus(4, 3);
        let model = tiny_model(DType::F64, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = TrainBatch::build(&corpus, &[0, 1, 2], &mut rng).unwrap();
        let m = batch.target_frames();
        let mut first = plan_first_channel(m, 0.0, &mut rng);
        first.mask.iter_mut().enumerate().for_each(|(i, x)| *x = i % 3 != 0);
        let mut residual = plan_residual(2, m, &mut rng);
        residual.mask.iter_mut().enumerate().for_each(|(i, x)| *x = i % 2 == 0);
        Self {
            model,
            batch,
            first,
            residual,
        }
    }

    pub fn losses(&self) -> BatchLosses {
        batch_losses_with_masks(
            &self.model,
            &self.batch,
            self.first.clone(),
            self.residual.clone(),
            &Ctx::eval(),
        )
        .unwrap()
    }

    pub fn loss(&self, which: Which) -> f64 {
        scalar(&pick(&self.losses(), which))
    }
}

fn set_entry(var: &Var, values: &[f64], i: usize, v: f64) {
    let mut vals = values.to_vec();
    vals[i] = v;
    var.set(&Tensor::from_vec(vals, var.shape(), &Device::Cpu).unwrap()).unwrap();
}

/// Central differences at the two largest-gradient entries of every
/// parameter tensor. Returns the number of entries compared and the largest
/// relative error.
pub fn gradient_check(which: Which) -> (usize, f64) {
    let fx = Fixture::new();
    let grads = pick(&fx.losses(), which).backward().unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in fx.model.store().vars() {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let values: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        for &i in order.iter().take(2) {
            if g[i].abs() < 1e-6 {
                continue;
            }
            set_entry(var, &values, i, values[i] + h);
            let up = fx.loss(which);
            set_entry(var, &values, i, values[i] - h);
            let down = fx.loss(which);
            set_entry(var, &values, i, values[i]);
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs());
            assert!(rel.is_finite(), "{name}[{i}]");
            if rel > worst {
                worst = rel;
            }
            checked += 1;
        }
    }
    (checked, worst)
}
