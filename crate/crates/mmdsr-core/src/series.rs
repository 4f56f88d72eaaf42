//! Time-aligned multimodal series with per-entry missingness masks.
//!
//! All channel blocks share the same length `T`. Values are stored row-major
//! `[T][channels]`. Ordinal levels and categorical classes are 0-based
//! integers throughout (files use the same convention).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("channel block `{0}` has length {1}, expected {2}")]
    LengthMismatch(&'static str, usize, usize),
    #[error("{0}")]
    Invalid(String),
}

/// One modality's values plus a missingness mask (`true` = observed).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Block {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub channels: usize,
}

impl Block {
    pub fn full(values: Vec<f64>, channels: usize) -> Self {
        let mask = vec![true; values.len()];
        Self {
            values,
            mask,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.values.len() / self.channels
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn observed(&self, t: usize, c: usize) -> bool {
        self.mask[t * self.channels + c]
    }
}

/// Channel-count and level metadata describing a series' shape.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeriesLayout {
    pub n_cont: usize,
    /// Levels per ordinal variable.
    pub ord_levels: Vec<usize>,
    pub n_count: usize,
    /// Classes per categorical variable.
    pub cat_classes: Vec<usize>,
    pub n_inputs: usize,
}

impl SeriesLayout {
    pub fn n_ord(&self) -> usize {
        self.ord_levels.len()
    }

    pub fn n_cat(&self) -> usize {
        self.cat_classes.len()
    }

    /// Width of the concatenated encoder input.
    pub fn encoder_channels(&self) -> usize {
        self.n_cont + self.n_ord() + self.n_count + self.n_cat()
    }

    pub fn has_any_modality(&self) -> bool {
        self.encoder_channels() > 0
    }
}

/// Time-aligned channels of continuous, ordinal, count, and categorical
/// observations, with optional external inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultimodalSeries {
    pub t_len: usize,
    pub continuous: Block,
    pub ordinal: Block,
    pub counts: Block,
    pub categorical: Block,
    /// External inputs `[T][P]`, always fully observed.
    pub inputs: Vec<f64>,
    pub layout: SeriesLayout,
}

impl MultimodalSeries {
    pub fn validate(&self) -> Result<(), SeriesError> {
        let checks: [(&'static str, &Block, usize); 4] = [
            ("continuous", &self.continuous, self.layout.n_cont),
            ("ordinal", &self.ordinal, self.layout.n_ord()),
            ("counts", &self.counts, self.layout.n_count),
            ("categorical", &self.categorical, self.layout.n_cat()),
        ];
        for (name, block, channels) in checks {
            if block.channels != channels {
                return Err(SeriesError::Invalid(format!(
                    "{name}: {} channels, layout says {channels}",
                    block.channels
                )));
            }
            if channels > 0 && block.len() != self.t_len {
                return Err(SeriesError::LengthMismatch(name, block.len(), self.t_len));
            }
            if block.values.len() != block.mask.len() {
                return Err(SeriesError::Invalid(format!("{name}: mask length mismatch")));
            }
        }
        if self.layout.n_inputs > 0 && self.inputs.len() != self.t_len * self.layout.n_inputs {
            return Err(SeriesError::LengthMismatch(
                "inputs",
                self.inputs.len() / self.layout.n_inputs.max(1),
                self.t_len,
            ));
        }
        for (i, &l) in self.layout.ord_levels.iter().enumerate() {
            if l < 2 {
                return Err(SeriesError::Invalid(format!(
                    "ordinal variable {i} has {l} levels, need >= 2"
                )));
            }
        }
        Ok(())
    }

    /// Extracts the window `[t0, t0 + len)` (all blocks, masks, inputs).
    pub fn window(&self, t0: usize, len: usize) -> MultimodalSeries {
        let cut = |b: &Block| Block {
            values: b.values[t0 * b.channels..(t0 + len) * b.channels].to_vec(),
            mask: b.mask[t0 * b.channels..(t0 + len) * b.channels].to_vec(),
            channels: b.channels,
        };
        let p = self.layout.n_inputs;
        MultimodalSeries {
            t_len: len,
            continuous: cut(&self.continuous),
            ordinal: cut(&self.ordinal),
            counts: cut(&self.counts),
            categorical: cut(&self.categorical),
            inputs: self.inputs[t0 * p..(t0 + len) * p].to_vec(),
            layout: self.layout.clone(),
        }
    }
}

/// Per-channel affine standardization of the continuous block.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on observed entries only.
    pub fn fit(block: &Block) -> Self {
        let n = block.channels;
        let mut mean = vec![0.0; n];
        let mut count = vec![0usize; n];
        for t in 0..block.len() {
            for c in 0..n {
                if block.observed(t, c) {
                    mean[c] += block.at(t, c);
                    count[c] += 1;
                }
            }
        }
        for c in 0..n {
            mean[c] /= count[c].max(1) as f64;
        }
        let mut var = vec![0.0; n];
        for t in 0..block.len() {
            for c in 0..n {
                if block.observed(t, c) {
                    let d = block.at(t, c) - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .zip(&count)
            .map(|(v, &k)| (v / k.max(1) as f64).sqrt().max(1e-12))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, block: &mut Block) {
        let n = block.channels;
        for t in 0..block.len() {
            for c in 0..n {
                block.values[t * n + c] = (block.values[t * n + c] - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn invert(&self, block: &mut Block) {
        let n = block.channels;
        for t in 0..block.len() {
            for c in 0..n {
                block.values[t * n + c] = block.values[t * n + c] * self.std[c] + self.mean[c];
            }
        }
    }
}

/// Which modality an encoder expert or channel group refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    Continuous,
    Ordinal,
    Count,
    Categorical,
}

pub const ALL_MODALITIES: [Modality; 4] = [
    Modality::Continuous,
    Modality::Ordinal,
    Modality::Count,
    Modality::Categorical,
];

impl MultimodalSeries {
    fn modality_block(&self, m: Modality) -> &Block {
        match m {
            Modality::Continuous => &self.continuous,
            Modality::Ordinal => &self.ordinal,
            Modality::Count => &self.counts,
            Modality::Categorical => &self.categorical,
        }
    }

    pub fn present_modalities(&self) -> Vec<Modality> {
        ALL_MODALITIES
            .into_iter()
            .filter(|&m| self.modality_block(m).channels > 0)
            .collect()
    }

    /// Encoder input channels for `modalities`, as a channel-major `[C, T]`
    /// matrix. Continuous channels are passed through as stored (the training
    /// pipeline z-scores them), ordinal and categorical are rescaled to
    /// `[0, 1]`, counts become `log(1 + c)`. Missing entries are imputed
    /// with 0 after scaling.
    pub fn encoder_input(&self, modalities: &[Modality]) -> Vec<f64> {
        let t_len = self.t_len;
        let mut out = Vec::new();
        for &m in modalities {
            let block = self.modality_block(m);
            for c in 0..block.channels {
                for t in 0..t_len {
                    let v = if block.observed(t, c) {
                        let raw = block.at(t, c);
                        match m {
                            Modality::Continuous => raw,
                            Modality::Ordinal => {
                                let l = self.layout.ord_levels[c].max(2);
                                raw / (l - 1) as f64
                            }
                            Modality::Categorical => {
                                let k = self.layout.cat_classes[c].max(2);
                                raw / (k - 1) as f64
                            }
                            Modality::Count => raw.ln_1p(),
                        }
                    } else {
                        0.0
                    };
                    out.push(v);
                }
            }
        }
        out
    }

    pub fn encoder_input_all(&self) -> Vec<f64> {
        self.encoder_input(&ALL_MODALITIES)
    }

    /// Channel count of `encoder_input` for the given modality subset.
    pub fn encoder_channels(&self, modalities: &[Modality]) -> usize {
        modalities
            .iter()
            .map(|&m| self.modality_block(m).channels)
            .sum()
    }
}
