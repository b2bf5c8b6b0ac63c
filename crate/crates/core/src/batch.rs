//! Training batches: utterances drawn under a frame budget, each with a
//! decoder prompt split and a distinct encoder-stage prompt.

use rand::Rng;

use crate::data_synth::Corpus;
use crate::error::{invalid, Result};
use crate::token_grid::{
    sample_disjoint_encoder_prompt, split_prompt, EncoderPrompt, PromptSplit, MIN_SPLIT_FRAMES,
};

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utterance: usize,
    pub speaker: u16,
    pub split: PromptSplit,
    pub encoder_prompt: EncoderPrompt,
}

impl TrainItem {
    pub fn target_frames(&self) -> usize {
        self.split.target_grid.frames()
    }
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub items: Vec<TrainItem>,
}

impl TrainBatch {
    pub fn build<R: Rng + ?Sized>(corpus: &Corpus, indices: &[usize], rng: &mut R) -> Result<Self> {
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            let utt = corpus
                .utterances
                .get(i)
                .ok_or_else(|| invalid!("utterance index {i} outside corpus of {}", corpus.len()))?;
            let split = split_prompt(utt, rng)?;
            let encoder_prompt = sample_disjoint_encoder_prompt(utt, split.k, rng)?;
            items.push(TrainItem {
                utterance: i,
                speaker: utt.speaker,
                split,
                encoder_prompt,
            });
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.items
            .iter()
            .map(|it| it.split.k + it.target_frames())
            .sum()
    }

    pub fn target_frames(&self) -> usize {
        self.items.iter().map(|it| it.target_frames()).sum()
    }
}

/// Indices of utterances long enough to split.
pub fn eligible_utterances(corpus: &Corpus) -> Vec<usize> {
    (0..corpus.len())
        .filter(|&i| corpus.utterances[i].frames() >= MIN_SPLIT_FRAMES)
        .collect()
}

/// Draws utterances uniformly with replacement until the next one would
/// exceed `frame_budget`. Always returns at least one.
pub fn sample_indices<R: Rng + ?Sized>(
    corpus: &Corpus,
    eligible: &[usize],
    frame_budget: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if eligible.is_empty() {
        return Err(invalid!(
            "corpus has no utterance with at least {MIN_SPLIT_FRAMES} frames"
        ));
    }
    let mut out = Vec::new();
    let mut frames = 0;
    loop {
        let i = eligible[rng.random_range(0..eligible.len())];
        let t = corpus.utterances[i].frames();
        if !out.is_empty() && frames + t > frame_budget {
            break;
        }
        frames += t;
        out.push(i);
    }
    Ok(out)
}
