//! Objective evaluation: paired cosine similarity, automatic MOS
//! prediction and t-SNE embedding visualization.

mod mos;
mod plot;
mod report;
mod stats;
mod tsne;

pub use mos::{
    make_quality_corpus, mos_report, read_score_file, train_mos_predictor, ExternalScores, MosConfig, MosItem,
    MosNet, MosPredictor, MOS_MAX, MOS_MIN,
};
pub use plot::render_scatter;
pub use report::{EvalReport, Metric, ReportTable};
pub use stats::{pearson, ranks, silhouette_score, spearman};
pub use tsne::{input_affinities, tsne_project, Affinities, TsneConfig, TsneOutput};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::speaker_encoder::SpeakerEncoder;

/// `a·b / (‖a‖‖b‖)`, clamped to `[−1, 1]` against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Synthesized (or real) utterance paired against a real one of the same speaker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtterancePair {
    pub synth_id: String,
    pub real_id: String,
    pub speaker_id: String,
}

/// An utterance already mapped to an embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedUtterance {
    pub id: String,
    pub speaker_id: String,
    pub embedding: Vec<f64>,
}

/// An utterance as audio.
#[derive(Clone, Debug)]
pub struct AudioUtterance {
    pub id: String,
    pub speaker_id: String,
    pub audio: Waveform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelfPairing {
    /// The real partner never shares the scored utterance's id.
    #[default]
    Exclude,
    Allow,
}

/// Draw one same-speaker real partner per scored utterance.
pub fn make_pairs(
    synth: &[(String, String)],
    real: &[(String, String)],
    policy: SelfPairing,
    seed: u64,
) -> Result<Vec<UtterancePair>> {
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, spk) in real {
        by_speaker.entry(spk.as_str()).or_default().push(id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(synth.len());
    for (id, spk) in synth {
        let pool: Vec<&str> = by_speaker
            .get(spk.as_str())
            .map(|v| v.iter().copied().filter(|r| policy == SelfPairing::Allow || r != id).collect())
            .unwrap_or_default();
        let real_id = pool
            .choose(&mut rng)
            .ok_or_else(|| Error::Data(format!("speaker `{spk}` has no real utterance to pair with `{id}`")))?;
        pairs.push(UtterancePair { synth_id: id.clone(), real_id: real_id.to_string(), speaker_id: spk.clone() });
    }
    Ok(pairs)
}

/// Score precomputed embeddings: one seeded same-speaker partner per
/// synthesized utterance, cosine per pair, mean into the report.
pub fn pair_and_score_embeddings(
    system: &str,
    test_set: &str,
    synth: &[EmbeddedUtterance],
    real: &[EmbeddedUtterance],
    policy: SelfPairing,
    seed: u64,
) -> Result<(EvalReport, Vec<UtterancePair>)> {
    let key = |u: &EmbeddedUtterance| (u.id.clone(), u.speaker_id.clone());
    let pairs = make_pairs(&synth.iter().map(key).collect::<Vec<_>>(), &real.iter().map(key).collect::<Vec<_>>(), policy, seed)?;
    let real_by_id: BTreeMap<&str, &EmbeddedUtterance> = real.iter().map(|u| (u.id.as_str(), u)).collect();
    let items = synth
        .iter()
        .zip(&pairs)
        .map(|(s, p)| Ok((s.id.clone(), cosine_similarity(&s.embedding, &real_by_id[p.real_id.as_str()].embedding)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::new(system, test_set, Metric::Similarity, items)?, pairs))
}

/// Embed audio with `encoder` on up to `jobs` workers, in input order.
pub fn embed_all(encoder: &SpeakerEncoder, utts: &[AudioUtterance], jobs: usize) -> Result<Vec<EmbeddedUtterance>> {
    crate::parallel::map(utts, jobs, |u| {
        Ok(EmbeddedUtterance {
            id: u.id.clone(),
            speaker_id: u.speaker_id.clone(),
            embedding: encoder.extract_utterance_embedding(&u.audio)?.values,
        })
    })
}

/// Embed both sets with `encoder` and score them with
/// [`pair_and_score_embeddings`].
#[allow(clippy::too_many_arguments)]
pub fn pair_and_score(
    system: &str,
    test_set: &str,
    synth: &[AudioUtterance],
    real: &[AudioUtterance],
    encoder: &SpeakerEncoder,
    policy: SelfPairing,
    seed: u64,
    jobs: usize,
) -> Result<(EvalReport, Vec<UtterancePair>)> {
    let s = embed_all(encoder, synth, jobs)?;
    let r = embed_all(encoder, real, jobs)?;
    pair_and_score_embeddings(system, test_set, &s, &r, policy, seed)
}

/// Control condition: every synthesized utterance is paired with a real
/// utterance of a different speaker.
pub fn mismatched_speaker_score(
    system: &str,
    test_set: &str,
    synth: &[EmbeddedUtterance],
    real: &[EmbeddedUtterance],
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = synth
        .iter()
        .map(|s| {
            let pool: Vec<&EmbeddedUtterance> = real.iter().filter(|r| r.speaker_id != s.speaker_id).collect();
            let r = pool
                .choose(&mut rng)
                .ok_or_else(|| Error::Data(format!("no other-speaker utterance to pair with `{}`", s.id)))?;
            Ok((s.id.clone(), cosine_similarity(&s.embedding, &r.embedding)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(system, test_set, Metric::Similarity, items)
}
