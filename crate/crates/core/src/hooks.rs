//! Self-attention interceptors and the per-pass hook set.
//!
//! Blocks are numbered from 1 over the denoiser's self-attention blocks in
//! forward order. An interceptor installed at a block replaces that block's
//! attention computation; blocks without one run plain attention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;

use crate::attention::{attention, attention_backward};
use crate::error::{Error, Result};
use crate::makvs::{makvs_attention_forward, makvs_attention_naive_forward, KvPair, StyleStrength};
use crate::mask::{FlatMask, SoftMaskVector};
use crate::sams::{sams_attention_backward, sams_attention_forward, SamsForward, SamsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Section {
    Encoder,
    Mid,
    Decoder,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Encoder => "encoder",
            Section::Mid => "mid",
            Section::Decoder => "decoder",
        })
    }
}

/// One self-attention block as enumerated by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    /// 1-based position among self-attention blocks in forward order.
    pub index: usize,
    pub section: Section,
    pub resolution: (usize, usize),
    /// Whether a cross-attention layer follows the self-attention.
    pub has_cross: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InterceptorKind {
    Sams,
    Makvs,
    MakvsNaive,
    Custom,
}

impl fmt::Display for InterceptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterceptorKind::Sams => "sams",
            InterceptorKind::Makvs => "makvs",
            InterceptorKind::MakvsNaive => "makvs_naive",
            InterceptorKind::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone)]
pub struct InterceptedAttention {
    pub output: Array2<f64>,
    /// Unmodified `softmax(Q K^T / sqrt(d))`, when requested.
    pub weights: Option<Array2<f64>>,
    /// The weights actually used to mix values, when they differ from `weights`.
    pub modified: Option<Array2<f64>>,
}

pub trait SelfAttentionInterceptor: Send + Sync + fmt::Debug {
    fn kind(&self) -> InterceptorKind;

    /// `keep_maps` asks for `weights`/`modified` to be filled in; it is always
    /// set on passes that will be differentiated.
    fn forward(
        &self,
        query: &Array2<f64>,
        key: &Array2<f64>,
        value: &Array2<f64>,
        block: &BlockInfo,
        keep_maps: bool,
    ) -> Result<InterceptedAttention>;

    /// Returns `(dQ, dK, dV)`. Interceptors that cannot be differentiated
    /// keep the default.
    fn backward(
        &self,
        _query: &Array2<f64>,
        _key: &Array2<f64>,
        _value: &Array2<f64>,
        _fwd: &InterceptedAttention,
        _d_out: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        Err(Error::Unsupported(format!(
            "{} interceptor has no reverse pass",
            self.kind()
        )))
    }
}

/// Plain attention behind the interceptor interface.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainInterceptor;

impl SelfAttentionInterceptor for PlainInterceptor {
    fn kind(&self) -> InterceptorKind {
        InterceptorKind::Custom
    }

    fn forward(
        &self,
        query: &Array2<f64>,
        key: &Array2<f64>,
        value: &Array2<f64>,
        _block: &BlockInfo,
        keep_maps: bool,
    ) -> Result<InterceptedAttention> {
        let (output, weights) = attention(query, key, value)?;
        Ok(InterceptedAttention {
            output,
            weights: keep_maps.then_some(weights),
            modified: None,
        })
    }

    fn backward(
        &self,
        query: &Array2<f64>,
        key: &Array2<f64>,
        value: &Array2<f64>,
        fwd: &InterceptedAttention,
        d_out: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let weights = fwd
            .weights
            .as_ref()
            .ok_or_else(|| Error::invalid("reverse pass needs the forward weights"))?;
        Ok(attention_backward(query, key, value, weights, d_out))
    }
}

#[derive(Debug, Clone)]
pub struct SamsInterceptor {
    pub softmask: SoftMaskVector,
    pub options: SamsOptions,
}

impl SelfAttentionInterceptor for SamsInterceptor {
    fn kind(&self) -> InterceptorKind {
        InterceptorKind::Sams
    }

    fn forward(
        &self,
        query: &Array2<f64>,
        key: &Array2<f64>,
        value: &Array2<f64>,
        _block: &BlockInfo,
        keep_maps: bool,
    ) -> Result<InterceptedAttention> {
        let f = sams_attention_forward(query, key, value, &self.softmask, self.options)?;
        Ok(InterceptedAttention {
            output: f.output,
            weights: keep_maps.then_some(f.weights),
            modified: keep_maps.then_some(f.modified),
        })
    }

    fn backward(
        &self,
        query: &Array2<f64>,
        key: &Array2<f64>,
        value: &Array2<f64>,
        fwd: &InterceptedAttention,
        d_out: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let (Some(weights), Some(modified)) = (&fwd.weights, &fwd.modified) else {
            return Err(Error::invalid("reverse pass needs the forward weights"));
        };
        let f = SamsForward {
            output: fwd.output.clone(),
            weights: weights.clone(),
            modified: modified.clone(),
        };
        Ok(sams_attention_backward(
            query,
            key,
            value,
            &self.softmask,
            self.options,
            &f,
            d_out,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct MakvsInterceptor {
    pub mask: FlatMask,
    pub strength: StyleStrength,
    /// Use the keys-replaced-only comparison variant.
    pub naive: bool,
}

impl SelfAttentionInterceptor for MakvsInterceptor {
    fn kind(&self) -> InterceptorKind {
        if self.naive {
            InterceptorKind::MakvsNaive
        } else {
            InterceptorKind::Makvs
        }
    }

    fn forward(
        &self,
        query: &Array2<f64>,
        key: &Array2<f64>,
        value: &Array2<f64>,
        block: &BlockInfo,
        keep_maps: bool,
    ) -> Result<InterceptedAttention> {
        let kv = KvPair::new(key.clone(), value.clone(), block.resolution, block.index)?;
        let f = if self.naive {
            makvs_attention_naive_forward(query, &kv, &self.mask)?
        } else {
            makvs_attention_forward(query, &kv, &self.mask, self.strength)?
        };
        let weights = keep_maps.then(|| crate::attention::attention_weights(query.view(), key.view()));
        Ok(InterceptedAttention {
            output: f.output,
            weights,
            modified: keep_maps.then_some(f.weights),
        })
    }
}

/// Which attention maps a pass should hand back.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum LayerFilter {
    #[default]
    None,
    All,
    Only(BTreeSet<usize>),
}

impl LayerFilter {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerFilter::None => false,
            LayerFilter::All => true,
            LayerFilter::Only(set) => set.contains(&layer),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct HookSet {
    interceptors: BTreeMap<usize, Arc<dyn SelfAttentionInterceptor>>,
    pub capture_self: LayerFilter,
    pub capture_cross: LayerFilter,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs an interceptor; a second install at the same block is an error.
    pub fn install(&mut self, layer: usize, hook: Arc<dyn SelfAttentionInterceptor>) -> Result<()> {
        if self.interceptors.contains_key(&layer) {
            return Err(Error::invalid(format!(
                "block {layer} already has an interceptor installed"
            )));
        }
        self.interceptors.insert(layer, hook);
        Ok(())
    }

    pub fn get(&self, layer: usize) -> Option<&Arc<dyn SelfAttentionInterceptor>> {
        self.interceptors.get(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.interceptors.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.interceptors.keys().copied()
    }

    /// `(block, kind)` for every installed interceptor, in block order.
    pub fn log(&self) -> Vec<(usize, InterceptorKind)> {
        self.interceptors
            .iter()
            .map(|(&l, h)| (l, h.kind()))
            .collect()
    }

    /// Fails if any installed or captured layer is missing from `blocks`.
    pub fn validate(&self, blocks: &[BlockInfo]) -> Result<()> {
        let known = |l: usize| blocks.iter().any(|b| b.index == l);
        for l in self.interceptors.keys() {
            if !known(*l) {
                return Err(Error::invalid(format!("no self-attention block {l}")));
            }
        }
        for filter in [&self.capture_self, &self.capture_cross] {
            if let LayerFilter::Only(set) = filter {
                if let Some(l) = set.iter().find(|l| !known(**l)) {
                    return Err(Error::invalid(format!("no self-attention block {l}")));
                }
            }
        }
        Ok(())
    }
}
