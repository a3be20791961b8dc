//! The anomaly-event prompt dictionary and the snippet/prompt similarity
//! machinery built on it.
//!
//! A dictionary is an ordered list of sentences describing anomalous events
//! ("A man is shooting a gun", ...) together with their sentence embeddings.
//! Embeddings are produced offline by any sentence encoder and supplied as a
//! LAPF file whose rows align with the text file lines; this crate never
//! runs an encoder itself.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{LapError, Result};
use crate::features::lapf;

/// The default dictionary shipped with the crate, one sentence per
/// anomalous event. Embed it offline to use it against real captions.
pub const DEFAULT_PROMPTS: [&str; 30] = [
    "A man is shooting a gun",
    "Something is on fire",
    "Two people are fighting on the ground",
    "A person is stealing from a store shelf",
    "A car is crashing into another vehicle",
    "Someone is being beaten with a stick",
    "A person is breaking a window with a tool",
    "An explosion is throwing debris into the air",
    "A man is robbing a cashier at gunpoint",
    "Someone is snatching a bag from a pedestrian",
    "A person is being abused by a group",
    "A motorcycle is colliding with a car",
    "Someone is vandalizing a parked car",
    "A person is shoplifting clothes into a bag",
    "Police are arresting a struggling suspect",
    "A crowd is rioting in the street",
    "Someone is throwing objects at people",
    "A person is lying injured on the road",
    "Smoke is spreading through a building",
    "A man is attacking someone with a knife",
    "A burglar is climbing through a window",
    "A truck is running over a pedestrian",
    "People are running away in panic",
    "Someone is setting fire to a trash bin",
    "A person is kicking a fallen victim",
    "A car is driving against the traffic",
    "Someone is firing shots into a crowd",
    "A person is being dragged on the ground",
    "A group is looting a shop at night",
    "A man is threatening people with a weapon",
];

/// Ordered anomaly prompts with their embedding matrix `P x d_t`.
#[derive(Debug, Clone)]
pub struct PromptDictionary {
    texts: Vec<String>,
    embeddings: Array2<f64>,
    norms: Vec<f64>,
}

impl PromptDictionary {
    /// Pair prompt texts with their embedding rows, in order.
    pub fn new(texts: Vec<String>, embeddings: Array2<f64>) -> Result<Self> {
        if texts.is_empty() {
            return Err(LapError::invalid("prompt dictionary must not be empty"));
        }
        if texts.len() != embeddings.nrows() {
            return Err(LapError::dims(
                "prompt embedding rows",
                texts.len(),
                embeddings.nrows(),
            ));
        }
        if !embeddings.iter().all(|x| x.is_finite()) {
            return Err(LapError::NonFinite("prompt embeddings".into()));
        }
        let norms: Vec<f64> = embeddings
            .axis_iter(Axis(0))
            .map(|row| row.dot(&row).sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(LapError::invalid(format!(
                "prompt {i} ({:?}) has a zero-norm embedding",
                texts[i]
            )));
        }
        Ok(PromptDictionary {
            texts,
            embeddings,
            norms,
        })
    }

    /// Load from a text file (one prompt per line, order significant) and a
    /// LAPF embedding file with one row per line.
    pub fn load(text_path: &Path, embedding_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(text_path).map_err(|e| LapError::io(text_path, e))?;
        let texts: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if texts.is_empty() {
            return Err(LapError::malformed(text_path, "no prompts"));
        }
        let embeddings = lapf::read_matrix(embedding_path)?;
        Self::new(texts, embeddings)
    }

    pub fn p(&self) -> usize {
        self.texts.len()
    }

    pub fn d_t(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }
}

/// Cosine similarities between every semantic feature row and every prompt:
/// entry `(i, j)` is `dot(t_i, m_j) / (|t_i| |m_j|)`.
///
/// A zero-norm feature row yields a zero similarity row (no caption
/// evidence) rather than a division by zero.
pub fn anomaly_matrix(semantic: ArrayView2<'_, f64>, dict: &PromptDictionary) -> Result<Array2<f64>> {
    if semantic.ncols() != dict.d_t() {
        return Err(LapError::dims(
            "semantic feature dimension vs dictionary d_t",
            dict.d_t(),
            semantic.ncols(),
        ));
    }
    if !semantic.iter().all(|x| x.is_finite()) {
        return Err(LapError::NonFinite("semantic features".into()));
    }
    let n = semantic.nrows();
    let p = dict.p();
    let mut psi = semantic.dot(&dict.embeddings().t());
    for i in 0..n {
        let row = semantic.row(i);
        let norm = row.dot(&row).sqrt();
        for j in 0..p {
            if norm == 0.0 {
                psi[[i, j]] = 0.0;
            } else {
                psi[[i, j]] /= norm * dict.norms[j];
            }
        }
    }
    Ok(psi)
}

/// Row maxima of the anomaly matrix and the prompt index attaining them;
/// ties go to the smallest index.
pub fn anomaly_vector(psi: &Array2<f64>) -> Result<(Vec<f64>, Vec<usize>)> {
    if psi.nrows() == 0 || psi.ncols() == 0 {
        return Err(LapError::invalid("anomaly matrix is empty"));
    }
    let mut c = Vec::with_capacity(psi.nrows());
    let mut best = Vec::with_capacity(psi.nrows());
    for row in psi.axis_iter(Axis(0)) {
        let mut max = row[0];
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > max {
                max = v;
                arg = j;
            }
        }
        c.push(max);
        best.push(arg);
    }
    Ok((c, best))
}

/// The anomaly matrix together with its derived per-snippet summaries.
#[derive(Debug, Clone)]
pub struct AnomalyEvidence {
    /// `N x P` cosine similarities.
    pub psi: Array2<f64>,
    /// Row maxima of `psi`.
    pub c: Vec<f64>,
    /// Argmax prompt per row, smallest index on ties.
    pub best_prompt: Vec<usize>,
    /// Pseudo labels, filled in by the labeling step when requested.
    pub pseudo: Option<Vec<u8>>,
}

pub fn evidence(semantic: ArrayView2<'_, f64>, dict: &PromptDictionary) -> Result<AnomalyEvidence> {
    let psi = anomaly_matrix(semantic, dict)?;
    let (c, best_prompt) = anomaly_vector(&psi)?;
    Ok(AnomalyEvidence {
        psi,
        c,
        best_prompt,
        pseudo: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCount {
    pub prompt: usize,
    pub text: String,
    pub count: usize,
}

/// Histogram of best-prompt assignments, sorted by count descending (index
/// ascending on ties). Prompts that were never the best match are omitted.
pub fn prompt_distribution(best_prompt: &[usize], dict: &PromptDictionary) -> Result<Vec<PromptCount>> {
    if best_prompt.is_empty() {
        return Err(LapError::invalid("no best-prompt assignments to histogram"));
    }
    let mut counts = vec![0usize; dict.p()];
    for &j in best_prompt {
        if j >= dict.p() {
            return Err(LapError::invalid(format!(
                "best-prompt index {j} out of range for P = {}",
                dict.p()
            )));
        }
        counts[j] += 1;
    }
    let mut out: Vec<PromptCount> = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, count)| count > 0)
        .map(|(prompt, count)| PromptCount {
            prompt,
            text: dict.text(prompt).to_string(),
            count,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then(a.prompt.cmp(&b.prompt)));
    Ok(out)
}
