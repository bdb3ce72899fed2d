use super::params::{Bound, Init, ParamId, ParamStore};
use crate::autodiff::{Conv1dAttrs, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Epsilon inside the global layer norm's square root.
pub const GLN_EPS: f64 = 1e-8;
pub const PRELU_INIT: f64 = 0.25;

/// 1-D convolution with optional per-channel bias. Input `[C_in, T]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: ParamId,
    bias: Option<ParamId>,
    attrs: Conv1dAttrs,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        attrs: Conv1dAttrs,
        bias: bool,
    ) -> Self {
        let cig = cin / attrs.groups;
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(&[cout, cig, kernel], cig * kernel),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout, 1])));
        Conv1d {
            weight,
            bias,
            attrs,
        }
    }

    /// Kernel-size-1 projection `cin -> cout` with bias.
    pub fn pointwise(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Conv1d::new(store, init, name, cin, cout, 1, Conv1dAttrs::default(), true)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv1d(x, p.var(self.weight), self.attrs)?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// PReLU with one shared slope.
#[derive(Clone, Debug)]
pub struct Prelu {
    slope: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Prelu {
            slope: store.add(format!("{name}.slope"), Tensor::scalar(PRELU_INIT)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.prelu(x, p.var(self.slope))
    }
}

/// Global layer norm with per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct GlobalLayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl GlobalLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        GlobalLayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[channels], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm_global(x, p.var(self.gain), p.var(self.bias), GLN_EPS)
    }
}

/// Learned analysis filterbank: `N` filters of length `L`, hop `L / 2`,
/// followed by ReLU. No bias, so silence maps to zero.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv: Conv1d,
    window: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, filters: usize, window: usize) -> Self {
        let attrs = Conv1dAttrs {
            stride: window / 2,
            ..Default::default()
        };
        Encoder {
            conv: Conv1d::new(store, init, name, 1, filters, window, attrs, false),
            window,
        }
    }

    /// Number of encoder frames for `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        encoder_frames(len, self.window)
    }

    /// `y` is `[1, samples]`; output `[N, T_enc]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let len = g.shape(y)[1];
        if len < self.window {
            return Err(Error::TooShort {
                what: "encoder input",
                len,
                min: self.window,
            });
        }
        let z = self.conv.forward(g, p, y)?;
        Ok(g.relu(z))
    }
}

pub fn encoder_frames(len: usize, window: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / (window / 2) + 1
    }
}

/// Overlap-add synthesis: transposed convolution `N -> 1`, kernel `L`,
/// stride `L / 2`.
#[derive(Clone, Debug)]
pub struct Decoder {
    weight: ParamId,
    channels: usize,
    window: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, window: usize) -> Self {
        Decoder {
            weight: store.add(
                format!("{name}.weight"),
                init.uniform(&[channels, 1, window], channels),
            ),
            channels,
            window,
        }
    }

    /// `m` is `[N, T_enc]`; output `[1, (T_enc - 1) * L/2 + L]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, m: Var) -> Result<Var> {
        let s = g.shape(m);
        if s.len() != 2 || s[0] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "decoder",
                lhs: s.to_vec(),
                rhs: vec![self.channels, self.window],
            });
        }
        g.conv1d_transpose(m, p.var(self.weight), self.window / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

/// Residual dilated depthwise-separable block:
/// `x + 1x1(gLN(PReLU(dconv(gLN(PReLU(1x1(x)))))))`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    cfg: ConvBlockConfig,
    expand: Conv1d,
    act1: Prelu,
    norm1: GlobalLayerNorm,
    depthwise: Conv1d,
    act2: Prelu,
    norm2: GlobalLayerNorm,
    project: Conv1d,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: ConvBlockConfig) -> Self {
        assert!(cfg.kernel % 2 == 1, "same padding needs an odd kernel");
        let (b, h) = (cfg.in_channels, cfg.hidden_channels);
        let dw_attrs = Conv1dAttrs {
            stride: 1,
            dilation: cfg.dilation,
            groups: h,
            padding: cfg.dilation * (cfg.kernel - 1) / 2,
        };
        ConvBlock {
            cfg,
            expand: Conv1d::pointwise(store, init, &format!("{name}.expand"), b, h),
            act1: Prelu::new(store, &format!("{name}.act1")),
            norm1: GlobalLayerNorm::new(store, &format!("{name}.norm1"), h),
            depthwise: Conv1d::new(store, init, &format!("{name}.depthwise"), h, h, cfg.kernel, dw_attrs, true),
            act2: Prelu::new(store, &format!("{name}.act2")),
            norm2: GlobalLayerNorm::new(store, &format!("{name}.norm2"), h),
            project: Conv1d::pointwise(store, init, &format!("{name}.project"), h, b),
        }
    }

    pub fn config(&self) -> ConvBlockConfig {
        self.cfg
    }

    /// Weight and bias of the final `H -> B` projection; zeroing both turns
    /// the block into the identity.
    pub fn output_projection(&self) -> (ParamId, Option<ParamId>) {
        (self.project.weight(), self.project.bias())
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv_block",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.cfg.in_channels],
            });
        }
        let h = self.expand.forward(g, p, x)?;
        let h = self.act1.forward(g, p, h)?;
        let h = self.norm1.forward(g, p, h)?;
        let h = self.depthwise.forward(g, p, h)?;
        let h = self.act2.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        let branch = self.project.forward(g, p, h)?;
        g.add(x, branch)
    }
}

/// Cross-entropy `-log softmax(W e)[label]` for an embedding `e` of shape
/// `[dim, 1]` and projection `w` of shape `[classes, dim]`.
pub fn linear_softmax_ce(g: &mut Graph, e: Var, w: Var, label: usize) -> Result<Var> {
    let classes = g.shape(w)[0];
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let logits = g.matmul(w, e)?;
    let logp = g.log_softmax(logits, 0)?;
    let picked = g.slice(logp, 0, label, label + 1)?;
    let picked = g.reshape(picked, &[1])?;
    Ok(g.scale(picked, -1.0))
}
