//! The learnable radiance field: positional encodings, the motion feature
//! texture with its two desk-scale encoders, and the two-branch MLP (density
//! trunk + view-conditioned color branch) with exact analytic gradients.
//!
//! Density is a function of the surface feature and the encoded distance
//! only; the encoded view direction enters the color branch exclusively, so
//! `d sigma / d view == 0` holds by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::flt;
use crate::nn::{apply_smooth_relu, sigmoid, smooth_relu_backward_inplace, softplus, Dense};

#[derive(Debug, Clone, PartialEq)]
pub enum FieldError {
    ShapeMismatch(String),
    NonFiniteInput,
    Config(String),
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldError::ShapeMismatch(m) => write!(f, "field: shape mismatch: {m}"),
            FieldError::NonFiniteInput => write!(f, "field: non-finite input rejected"),
            FieldError::Config(m) => write!(f, "field: configuration error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FieldError {}

/// Frequency-based positional encoding specification.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionalEncodingSpec {
    pub frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncodingSpec {
    pub fn new(frequencies: usize, include_input: bool) -> PositionalEncodingSpec {
        PositionalEncodingSpec { frequencies, include_input }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.frequencies + usize::from(self.include_input))
    }
}

/// Per scalar component p (component-major): optionally p itself, then
/// `(sin(2^j pi p), cos(2^j pi p))` for j = 0..L-1.
pub fn positional_encoding(input: &[f64], spec: &PositionalEncodingSpec, out: &mut Vec<f64>) {
    out.clear();
    out.reserve(spec.output_dim(input.len()));
    for &p in input {
        if spec.include_input {
            out.push(p);
        }
        let mut scale = core::f64::consts::PI;
        for _ in 0..spec.frequencies {
            out.push(flt::sin(scale * p));
            out.push(flt::cos(scale * p));
            scale *= 2.0;
        }
    }
}

/// H x W x C texel grid of learned features, row-major.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureTexture {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub texels: Vec<f64>,
}

impl FeatureTexture {
    pub fn zeros(width: usize, height: usize, channels: usize) -> FeatureTexture {
        FeatureTexture { width, height, channels, texels: vec![0.0; width * height * channels] }
    }

    pub fn constant(width: usize, height: usize, values: &[f64]) -> FeatureTexture {
        let channels = values.len();
        let mut texels = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            texels.extend_from_slice(values);
        }
        FeatureTexture { width, height, channels, texels }
    }

    #[inline]
    pub fn texel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.texels[base..base + self.channels]
    }
}

/// Bilinear footprint of a uv sample over texel centers at
/// ((col+0.5)/W, (row+0.5)/H), clamped to the edge.
fn bilinear_footprint(width: usize, height: usize, uv: [f64; 2]) -> ([(usize, usize); 4], [f64; 4]) {
    let u = uv[0].clamp(0.0, 1.0);
    let v = uv[1].clamp(0.0, 1.0);
    let x = u * width as f64 - 0.5;
    let y = v * height as f64 - 0.5;
    let x0f = flt::floor(x);
    let y0f = flt::floor(y);
    let fx = x - x0f;
    let fy = y - y0f;
    let clamp_col = |c: f64| -> usize { c.max(0.0).min(width as f64 - 1.0) as usize };
    let clamp_row = |r: f64| -> usize { r.max(0.0).min(height as f64 - 1.0) as usize };
    let c0 = clamp_col(x0f);
    let c1 = clamp_col(x0f + 1.0);
    let r0 = clamp_row(y0f);
    let r1 = clamp_row(y0f + 1.0);
    (
        [(r0, c0), (r0, c1), (r1, c0), (r1, c1)],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

/// Bilinear texture fetch; uv outside [0,1]^2 clamps to the edge.
pub fn sample_feature_texture(texture: &FeatureTexture, uv: [f64; 2], out: &mut [f64]) {
    debug_assert_eq!(out.len(), texture.channels);
    let (corners, weights) = bilinear_footprint(texture.width, texture.height, uv);
    out.fill(0.0);
    for (corner, w) in corners.iter().zip(weights.iter()) {
        let texel = texture.texel(corner.0, corner.1);
        for (o, &t) in out.iter_mut().zip(texel.iter()) {
            *o += w * t;
        }
    }
}

/// Scatters the upstream feature gradient back onto the four touched texels.
pub fn sample_feature_texture_backward(
    width: usize,
    height: usize,
    channels: usize,
    uv: [f64; 2],
    upstream: &[f64],
    grad_texels: &mut [f64],
) {
    debug_assert_eq!(upstream.len(), channels);
    debug_assert_eq!(grad_texels.len(), width * height * channels);
    let (corners, weights) = bilinear_footprint(width, height, uv);
    for (corner, w) in corners.iter().zip(weights.iter()) {
        let base = (corner.0 * width + corner.1) * channels;
        for (c, &g) in upstream.iter().enumerate() {
            grad_texels[base + c] += w * g;
        }
    }
}

/// RGB texture maps of a motion window, concatenated channelwise when fed to
/// the convolutional encoder.
#[derive(Clone, Debug)]
pub struct TextureStack {
    pub maps: Vec<FeatureTexture>,
}

impl TextureStack {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.maps.is_empty() {
            return Err(FieldError::Config(String::from("texture stack is empty")));
        }
        let (w, h) = (self.maps[0].width, self.maps[0].height);
        for m in &self.maps {
            if m.width != w || m.height != h {
                return Err(FieldError::ShapeMismatch(String::from("texture stack resolutions differ")));
            }
            if m.channels != 3 {
                return Err(FieldError::ShapeMismatch(String::from("texture stack maps must be RGB")));
            }
            if m.texels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(FieldError::Config(String::from("texture stack values must lie in [0,1]")));
            }
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        3 * self.maps.len()
    }
}

/// Directly optimizable texel grid: the stack is ignored and the features are
/// free parameters. Starts at zero.
#[derive(Clone, Debug)]
pub struct GridEncoder {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    params: Vec<f64>,
}

impl GridEncoder {
    pub fn new(width: usize, height: usize, channels: usize) -> GridEncoder {
        GridEncoder { width, height, channels, params: vec![0.0; width * height * channels] }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    stride: usize,
}

impl ConvSpec {
    fn param_len(&self) -> usize {
        self.out_ch * self.in_ch * 9 + self.out_ch
    }
}

const CONV_HIDDEN_1: usize = 16;
const CONV_HIDDEN_2: usize = 32;

/// Strided convolutional encoder-decoder over the channel-concatenated stack:
/// two 3x3 stride-2 convolutions (widths 16 and 32) followed by a 4x nearest
/// upsample and a zero-initialized 3x3 output convolution.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub height: usize,
    convs: [ConvSpec; 3],
    offsets: [usize; 4],
    params: Vec<f64>,
}

impl ConvEncoder {
    pub fn new(
        width: usize,
        height: usize,
        in_channels: usize,
        out_channels: usize,
        seed: u64,
    ) -> Result<ConvEncoder, FieldError> {
        if width % 4 != 0 || height % 4 != 0 {
            return Err(FieldError::Config(format!(
                "conv encoder needs resolutions divisible by 4, got {width}x{height}"
            )));
        }
        let convs = [
            ConvSpec { in_ch: in_channels, out_ch: CONV_HIDDEN_1, stride: 2 },
            ConvSpec { in_ch: CONV_HIDDEN_1, out_ch: CONV_HIDDEN_2, stride: 2 },
            ConvSpec { in_ch: CONV_HIDDEN_2, out_ch: out_channels, stride: 1 },
        ];
        let mut offsets = [0usize; 4];
        for i in 0..3 {
            offsets[i + 1] = offsets[i] + convs[i].param_len();
        }
        let mut params = vec![0.0; offsets[3]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        for (i, conv) in convs.iter().enumerate().take(2) {
            let bound = flt::sqrt(6.0 / ((conv.in_ch + conv.out_ch) * 9) as f64);
            for w in params[offsets[i]..offsets[i] + conv.out_ch * conv.in_ch * 9].iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        // The output convolution stays zero so the encoded texture starts at zero.
        Ok(ConvEncoder { in_channels, out_channels, width, height, convs, offsets, params })
    }

    fn layer_params(&self, idx: usize) -> (&[f64], &[f64]) {
        let spec = self.convs[idx];
        let start = self.offsets[idx];
        let w_len = spec.out_ch * spec.in_ch * 9;
        (&self.params[start..start + w_len], &self.params[start + w_len..start + spec.param_len()])
    }

    fn stack_to_chw(&self, stack: &TextureStack) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut input = vec![0.0; self.in_channels * h * w];
        for (m_idx, map) in stack.maps.iter().enumerate() {
            for row in 0..h {
                for col in 0..w {
                    let texel = map.texel(row, col);
                    for c in 0..3 {
                        input[((m_idx * 3 + c) * h + row) * w + col] = texel[c];
                    }
                }
            }
        }
        input
    }

    /// Forward pass returning the intermediate buffers needed by backward,
    /// plus the final texture in H x W x C order.
    fn forward(&self, stack: &TextureStack) -> (ConvActivations, Vec<f64>) {
        let (w, h) = (self.width, self.height);
        let input = self.stack_to_chw(stack);

        let c1 = self.convs[0];
        let (h1, w1) = (h / 2, w / 2);
        let mut pre1 = vec![0.0; c1.out_ch * h1 * w1];
        let (wts, bias) = self.layer_params(0);
        conv3x3_forward(&input, c1.in_ch, h, w, wts, bias, c1.out_ch, c1.stride, &mut pre1);
        let mut act1 = vec![0.0; pre1.len()];
        apply_smooth_relu(&pre1, &mut act1);

        let c2 = self.convs[1];
        let (h2, w2) = (h1 / 2, w1 / 2);
        let mut pre2 = vec![0.0; c2.out_ch * h2 * w2];
        let (wts, bias) = self.layer_params(1);
        conv3x3_forward(&act1, c2.in_ch, h1, w1, wts, bias, c2.out_ch, c2.stride, &mut pre2);
        let mut act2 = vec![0.0; pre2.len()];
        apply_smooth_relu(&pre2, &mut act2);

        let mut up = vec![0.0; c2.out_ch * h * w];
        upsample_nearest(&act2, c2.out_ch, h2, w2, 4, &mut up);

        let c3 = self.convs[2];
        let mut out_chw = vec![0.0; c3.out_ch * h * w];
        let (wts, bias) = self.layer_params(2);
        conv3x3_forward(&up, c3.in_ch, h, w, wts, bias, c3.out_ch, c3.stride, &mut out_chw);

        // CHW -> HWC for the bilinear sampling convention.
        let mut out_hwc = vec![0.0; out_chw.len()];
        for c in 0..c3.out_ch {
            for y in 0..h {
                for x in 0..w {
                    out_hwc[(y * w + x) * c3.out_ch + c] = out_chw[(c * h + y) * w + x];
                }
            }
        }
        (ConvActivations { input, pre1, act1, pre2, act2, up }, out_hwc)
    }

    fn backward(&self, stack: &TextureStack, grad_texels_hwc: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let (acts, _) = self.forward(stack);
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let [c1, c2, c3] = self.convs;

        let mut grad_params = vec![0.0; self.params.len()];
        // HWC -> CHW.
        let mut grad_out = vec![0.0; grad_texels_hwc.len()];
        for c in 0..c3.out_ch {
            for y in 0..h {
                for x in 0..w {
                    grad_out[(c * h + y) * w + x] = grad_texels_hwc[(y * w + x) * c3.out_ch + c];
                }
            }
        }

        let w3_len = c3.out_ch * c3.in_ch * 9;
        let mut grad_up = vec![0.0; acts.up.len()];
        {
            let (w3, _) = self.layer_params(2);
            let (gw, gb) = grad_params[self.offsets[2]..self.offsets[3]].split_at_mut(w3_len);
            conv3x3_backward(&acts.up, c3.in_ch, h, w, w3, c3.out_ch, 1, &grad_out, gw, gb, &mut grad_up);
        }

        let mut grad_act2 = vec![0.0; acts.act2.len()];
        upsample_nearest_backward(&grad_up, c2.out_ch, h2, w2, 4, &mut grad_act2);
        smooth_relu_backward_inplace(&acts.pre2, &mut grad_act2);

        let w2_len = c2.out_ch * c2.in_ch * 9;
        let mut grad_act1 = vec![0.0; acts.act1.len()];
        {
            let (w2_, _) = self.layer_params(1);
            let (gw, gb) = grad_params[self.offsets[1]..self.offsets[2]].split_at_mut(w2_len);
            conv3x3_backward(&acts.act1, c2.in_ch, h1, w1, w2_, c2.out_ch, 2, &grad_act2, gw, gb, &mut grad_act1);
        }
        smooth_relu_backward_inplace(&acts.pre1, &mut grad_act1);

        let w1_len = c1.out_ch * c1.in_ch * 9;
        let mut grad_input = vec![0.0; acts.input.len()];
        {
            let (w1_, _) = self.layer_params(0);
            let (gw, gb) = grad_params[self.offsets[0]..self.offsets[1]].split_at_mut(w1_len);
            conv3x3_backward(&acts.input, c1.in_ch, h, w, w1_, c1.out_ch, 2, &grad_act1, gw, gb, &mut grad_input);
        }
        grad_params
    }
}

struct ConvActivations {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    up: Vec<f64>,
}

/// 3x3 convolution, zero padding 1, arbitrary stride, CHW layout.
fn conv3x3_forward(
    input: &[f64],
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    stride: usize,
    output: &mut [f64],
) {
    let out_h = in_h / stride;
    let out_w = in_w / stride;
    debug_assert_eq!(output.len(), out_ch * out_h * out_w);
    for oc in 0..out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let cy = (oy * stride) as isize;
                let cx = (ox * stride) as isize;
                let mut acc = bias[oc];
                for ic in 0..in_ch {
                    let w_base = (oc * in_ch + ic) * 9;
                    let i_base = ic * in_h * in_w;
                    for ky in 0..3 {
                        let iy = cy + ky as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = cx + kx as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            acc += weights[w_base + ky * 3 + kx]
                                * input[i_base + iy as usize * in_w + ix as usize];
                        }
                    }
                }
                output[(oc * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
}

/// Reverse of [`conv3x3_forward`]: accumulates weight/bias gradients and
/// writes the input gradient.
fn conv3x3_backward(
    input: &[f64],
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    weights: &[f64],
    out_ch: usize,
    stride: usize,
    grad_output: &[f64],
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: &mut [f64],
) {
    let out_h = in_h / stride;
    let out_w = in_w / stride;
    grad_input.fill(0.0);
    for oc in 0..out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = grad_output[(oc * out_h + oy) * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                grad_bias[oc] += g;
                let cy = (oy * stride) as isize;
                let cx = (ox * stride) as isize;
                for ic in 0..in_ch {
                    let w_base = (oc * in_ch + ic) * 9;
                    let i_base = ic * in_h * in_w;
                    for ky in 0..3 {
                        let iy = cy + ky as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = cx + kx as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let idx = i_base + iy as usize * in_w + ix as usize;
                            grad_weights[w_base + ky * 3 + kx] += g * input[idx];
                            grad_input[idx] += g * weights[w_base + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

fn upsample_nearest(input: &[f64], ch: usize, h: usize, w: usize, factor: usize, out: &mut [f64]) {
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(out.len(), ch * oh * ow);
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                out[(c * oh + y) * ow + x] = input[(c * h + y / factor) * w + x / factor];
            }
        }
    }
}

fn upsample_nearest_backward(
    grad_out: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    factor: usize,
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h * factor, w * factor);
    grad_in.fill(0.0);
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                grad_in[(c * h + y / factor) * w + x / factor] += grad_out[(c * oh + y) * ow + x];
            }
        }
    }
}

/// The pluggable texture encoder.
#[derive(Clone, Debug)]
pub enum FeatureEncoder {
    Grid(GridEncoder),
    Conv(ConvEncoder),
}

impl FeatureEncoder {
    pub fn params(&self) -> &[f64] {
        match self {
            FeatureEncoder::Grid(g) => &g.params,
            FeatureEncoder::Conv(c) => &c.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            FeatureEncoder::Grid(g) => &mut g.params,
            FeatureEncoder::Conv(c) => &mut c.params,
        }
    }

    pub fn param_len(&self) -> usize {
        self.params().len()
    }

    pub fn output_resolution(&self) -> (usize, usize) {
        match self {
            FeatureEncoder::Grid(g) => (g.width, g.height),
            FeatureEncoder::Conv(c) => (c.width, c.height),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            FeatureEncoder::Grid(g) => g.channels,
            FeatureEncoder::Conv(c) => c.out_channels,
        }
    }

    /// Produces the feature texture. The grid variant ignores the stack (its
    /// parameters are the texels); the conv variant requires one.
    pub fn encode(&self, stack: Option<&TextureStack>) -> Result<FeatureTexture, FieldError> {
        match self {
            FeatureEncoder::Grid(g) => Ok(FeatureTexture {
                width: g.width,
                height: g.height,
                channels: g.channels,
                texels: g.params.clone(),
            }),
            FeatureEncoder::Conv(c) => {
                let stack = stack.ok_or_else(|| {
                    FieldError::Config(String::from("conv encoder requires a texture stack"))
                })?;
                stack.validate()?;
                if stack.channel_count() != c.in_channels {
                    return Err(FieldError::ShapeMismatch(format!(
                        "stack has {} channels, encoder expects {}",
                        stack.channel_count(),
                        c.in_channels
                    )));
                }
                if stack.maps[0].width != c.width || stack.maps[0].height != c.height {
                    return Err(FieldError::ShapeMismatch(String::from(
                        "stack resolution does not match encoder configuration",
                    )));
                }
                let (_, out_hwc) = c.forward(stack);
                Ok(FeatureTexture { width: c.width, height: c.height, channels: c.out_channels, texels: out_hwc })
            }
        }
    }

    /// Gradients of a scalar loss w.r.t. encoder parameters, given gradients
    /// on the output texels (H x W x C layout).
    pub fn encode_backward(
        &self,
        stack: Option<&TextureStack>,
        grad_texels: &[f64],
    ) -> Result<Vec<f64>, FieldError> {
        match self {
            FeatureEncoder::Grid(g) => {
                debug_assert_eq!(grad_texels.len(), g.params.len());
                Ok(grad_texels.to_vec())
            }
            FeatureEncoder::Conv(c) => {
                let stack = stack.ok_or_else(|| {
                    FieldError::Config(String::from("conv encoder requires a texture stack"))
                })?;
                Ok(c.backward(stack, grad_texels))
            }
        }
    }
}

/// Radiance MLP architecture knobs; defaults are the production values.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RadianceMlpConfig {
    pub feature_dim: usize,
    pub distance_frequencies: usize,
    pub view_frequencies: usize,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub view_depth: usize,
    pub view_width: usize,
    pub skip_every: usize,
}

impl Default for RadianceMlpConfig {
    fn default() -> Self {
        RadianceMlpConfig {
            feature_dim: 32,
            distance_frequencies: 10,
            view_frequencies: 4,
            trunk_depth: 16,
            trunk_width: 128,
            view_depth: 16,
            view_width: 64,
            skip_every: 4,
        }
    }
}

impl RadianceMlpConfig {
    pub fn distance_dim(&self) -> usize {
        2 * self.distance_frequencies
    }

    pub fn view_dim(&self) -> usize {
        6 * self.view_frequencies
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.feature_dim + self.distance_dim()
    }

    pub fn view_input_dim(&self) -> usize {
        self.trunk_width + self.view_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.distance_dim() + self.view_dim()
    }

    pub fn distance_spec(&self) -> PositionalEncodingSpec {
        PositionalEncodingSpec::new(self.distance_frequencies, false)
    }

    pub fn view_spec(&self) -> PositionalEncodingSpec {
        PositionalEncodingSpec::new(self.view_frequencies, false)
    }
}

/// One field evaluation input: the raw surface feature plus the encoded
/// normalized distance and encoded view direction.
#[derive(Clone, Debug)]
pub struct FieldInput {
    pub surface_feature: Vec<f64>,
    pub encoded_distance: Vec<f64>,
    pub encoded_view: Vec<f64>,
}

impl FieldInput {
    pub fn is_finite(&self) -> bool {
        self.surface_feature
            .iter()
            .chain(&self.encoded_distance)
            .chain(&self.encoded_view)
            .all(|v| v.is_finite())
    }
}

/// Batched field inputs: row-major `[feature | encoded_distance | encoded_view]`.
#[derive(Clone, Debug)]
pub struct FieldBatch {
    pub count: usize,
    pub data: Vec<f64>,
}

impl FieldBatch {
    pub fn with_capacity(config: &RadianceMlpConfig, count: usize) -> FieldBatch {
        FieldBatch { count: 0, data: Vec::with_capacity(count * config.input_dim()) }
    }

    pub fn push(&mut self, feature: &[f64], encoded_distance: &[f64], encoded_view: &[f64]) {
        self.data.extend_from_slice(feature);
        self.data.extend_from_slice(encoded_distance);
        self.data.extend_from_slice(encoded_view);
        self.count += 1;
    }
}

enum LayerKind {
    Plain,
    Skip,
}

struct BranchLayer {
    dense: Dense,
    kind: LayerKind,
    offset: usize,
}

/// The two-branch radiance MLP. The trunk consumes `[feature | distance]`,
/// re-injecting that block every `skip_every` layers; the density head reads
/// the trunk output through a softplus. The view branch consumes
/// `[trunk output | encoded view]` with its own skips and ends in a sigmoid
/// color head.
pub struct RadianceMlp {
    pub config: RadianceMlpConfig,
    trunk: Vec<BranchLayer>,
    view: Vec<BranchLayer>,
    density_head: BranchLayer,
    color_head: BranchLayer,
    params: Vec<f64>,
}

/// Cached activations of one batched forward pass.
pub struct RadianceCache {
    batch: usize,
    trunk_inputs: Vec<Vec<f64>>,
    trunk_preacts: Vec<Vec<f64>>,
    view_inputs: Vec<Vec<f64>>,
    view_preacts: Vec<Vec<f64>>,
    density_pre: Vec<f64>,
    color_values: Vec<f64>,
    trunk_out: Vec<f64>,
}

/// Gradients from [`RadianceMlp::backward_batch`].
pub struct FieldGrads {
    pub params: Vec<f64>,
    /// Row-major, same layout as [`FieldBatch`]: `[feature | dist | view]`.
    pub inputs: Vec<f64>,
}

impl RadianceMlp {
    pub fn new(config: RadianceMlpConfig, seed: u64) -> RadianceMlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = Vec::new();
        let make = |dense: Dense, rng: &mut ChaCha8Rng, params: &mut Vec<f64>, kind: LayerKind| {
            let offset = params.len();
            params.resize(offset + dense.param_len(), 0.0);
            dense.init(&mut params[offset..], rng);
            BranchLayer { dense, kind, offset }
        };
        let mut trunk = Vec::new();
        for i in 0..config.trunk_depth {
            let (in_dim, kind) = if i == 0 {
                (config.trunk_input_dim(), LayerKind::Plain)
            } else if i % config.skip_every == 0 {
                (config.trunk_width + config.trunk_input_dim(), LayerKind::Skip)
            } else {
                (config.trunk_width, LayerKind::Plain)
            };
            trunk.push(make(Dense::new(in_dim, config.trunk_width), &mut rng, &mut params, kind));
        }
        let density_head = make(Dense::new(config.trunk_width, 1), &mut rng, &mut params, LayerKind::Plain);
        let mut view = Vec::new();
        for j in 0..config.view_depth {
            let (in_dim, kind) = if j == 0 {
                (config.view_input_dim(), LayerKind::Plain)
            } else if j % config.skip_every == 0 {
                (config.view_width + config.view_input_dim(), LayerKind::Skip)
            } else {
                (config.view_width, LayerKind::Plain)
            };
            view.push(make(Dense::new(in_dim, config.view_width), &mut rng, &mut params, kind));
        }
        let color_head = make(Dense::new(config.view_width, 3), &mut rng, &mut params, LayerKind::Plain);
        RadianceMlp { config, trunk, view, density_head, color_head, params }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    fn layer_params(&self, layer: &BranchLayer) -> &[f64] {
        &self.params[layer.offset..layer.offset + layer.dense.param_len()]
    }

    /// Batched forward pass over rows of `[feature | dist | view]`.
    /// Returns per-sample colors (B x 3) and densities (B).
    pub fn forward_batch(
        &self,
        batch: &FieldBatch,
        want_cache: bool,
    ) -> (Vec<f64>, Vec<f64>, Option<RadianceCache>) {
        let cfg = &self.config;
        let b = batch.count;
        let total = cfg.input_dim();
        assert_eq!(batch.data.len(), b * total, "field batch shape mismatch");
        let trunk_in_dim = cfg.trunk_input_dim();
        let view_dim = cfg.view_dim();

        // Split rows into the trunk conditioning block and the view encoding.
        let mut trunk_block = vec![0.0; b * trunk_in_dim];
        let mut view_block = vec![0.0; b * view_dim];
        for row in 0..b {
            let src = &batch.data[row * total..(row + 1) * total];
            trunk_block[row * trunk_in_dim..(row + 1) * trunk_in_dim].copy_from_slice(&src[..trunk_in_dim]);
            view_block[row * view_dim..(row + 1) * view_dim].copy_from_slice(&src[trunk_in_dim..]);
        }

        let mut trunk_inputs = Vec::new();
        let mut trunk_preacts = Vec::new();
        let mut cur = trunk_block.clone();
        for layer in &self.trunk {
            let input = match layer.kind {
                LayerKind::Plain => cur,
                LayerKind::Skip => concat_rows(&cur, cfg.trunk_width, &trunk_block, trunk_in_dim, b),
            };
            let mut pre = vec![0.0; b * layer.dense.out_dim];
            layer.dense.forward(self.layer_params(layer), &input, b, &mut pre);
            let mut act = vec![0.0; pre.len()];
            apply_smooth_relu(&pre, &mut act);
            if want_cache {
                trunk_inputs.push(input);
                trunk_preacts.push(pre);
            }
            cur = act;
        }
        let trunk_out = cur;

        let mut density_pre = vec![0.0; b];
        self.density_head
            .dense
            .forward(self.layer_params(&self.density_head), &trunk_out, b, &mut density_pre);
        let sigma: Vec<f64> = density_pre.iter().map(|&z| softplus(z)).collect();

        let view_input_block = concat_rows(&trunk_out, cfg.trunk_width, &view_block, view_dim, b);
        let mut view_inputs = Vec::new();
        let mut view_preacts = Vec::new();
        let mut cur = view_input_block.clone();
        for layer in &self.view {
            let input = match layer.kind {
                LayerKind::Plain => cur,
                LayerKind::Skip => concat_rows(&cur, cfg.view_width, &view_input_block, cfg.view_input_dim(), b),
            };
            let mut pre = vec![0.0; b * layer.dense.out_dim];
            layer.dense.forward(self.layer_params(layer), &input, b, &mut pre);
            let mut act = vec![0.0; pre.len()];
            apply_smooth_relu(&pre, &mut act);
            if want_cache {
                view_inputs.push(input);
                view_preacts.push(pre);
            }
            cur = act;
        }
        let mut color_pre = vec![0.0; b * 3];
        self.color_head.dense.forward(self.layer_params(&self.color_head), &cur, b, &mut color_pre);
        let rgb: Vec<f64> = color_pre.iter().map(|&y| sigmoid(y)).collect();

        let cache = if want_cache {
            // The final view activation feeds the color head backward.
            view_inputs.push(cur);
            Some(RadianceCache {
                batch: b,
                trunk_inputs,
                trunk_preacts,
                view_inputs,
                view_preacts,
                density_pre,
                color_values: rgb.clone(),
                trunk_out,
            })
        } else {
            None
        };
        (rgb, sigma, cache)
    }

    /// Exact reverse-mode gradients for the cached forward pass.
    pub fn backward_batch(&self, cache: &RadianceCache, grad_rgb: &[f64], grad_sigma: &[f64]) -> FieldGrads {
        let cfg = &self.config;
        let b = cache.batch;
        assert_eq!(grad_rgb.len(), b * 3, "rgb gradient shape mismatch");
        assert_eq!(grad_sigma.len(), b, "sigma gradient shape mismatch");
        let trunk_in_dim = cfg.trunk_input_dim();
        let view_dim = cfg.view_dim();
        let mut grad_params = vec![0.0; self.params.len()];

        // Color head: c = sigmoid(y).
        let mut grad_color_pre = vec![0.0; b * 3];
        for i in 0..b * 3 {
            let s = cache.color_values[i];
            grad_color_pre[i] = grad_rgb[i] * s * (1.0 - s);
        }
        let last_view_act = cache.view_inputs.last().unwrap();
        let mut grad_view_cur = vec![0.0; b * cfg.view_width];
        self.color_head.dense.backward(
            self.layer_params(&self.color_head),
            last_view_act,
            &grad_color_pre,
            b,
            &mut grad_params[self.color_head.offset..self.color_head.offset + self.color_head.dense.param_len()],
            &mut grad_view_cur,
        );

        // View branch backward; skip layers split their concatenated input.
        let mut grad_view_block_in = vec![0.0; b * cfg.view_input_dim()];
        for j in (0..self.view.len()).rev() {
            let layer = &self.view[j];
            smooth_relu_backward_inplace(&cache.view_preacts[j], &mut grad_view_cur);
            let mut grad_in = vec![0.0; b * layer.dense.in_dim];
            layer.dense.backward(
                self.layer_params(layer),
                &cache.view_inputs[j],
                &grad_view_cur,
                b,
                &mut grad_params[layer.offset..layer.offset + layer.dense.param_len()],
                &mut grad_in,
            );
            match layer.kind {
                LayerKind::Plain => grad_view_cur = grad_in,
                LayerKind::Skip => {
                    let (prev, injected) =
                        split_rows(&grad_in, cfg.view_width, cfg.view_width + cfg.view_input_dim(), b);
                    add_assign(&mut grad_view_block_in, &injected);
                    grad_view_cur = prev;
                }
            }
        }
        // Layer 0 consumed the view input block directly.
        add_assign(&mut grad_view_block_in, &grad_view_cur);

        // Split into trunk output and encoded view parts.
        let (mut grad_trunk_out, grad_encoded_view) =
            split_rows(&grad_view_block_in, cfg.trunk_width, cfg.view_input_dim(), b);

        // Density head: sigma = softplus(z); d sigma/dz = sigmoid(z).
        let mut grad_density_pre = vec![0.0; b];
        for i in 0..b {
            grad_density_pre[i] = grad_sigma[i] * sigmoid(cache.density_pre[i]);
        }
        let mut grad_from_density = vec![0.0; b * cfg.trunk_width];
        self.density_head.dense.backward(
            self.layer_params(&self.density_head),
            &cache.trunk_out,
            &grad_density_pre,
            b,
            &mut grad_params
                [self.density_head.offset..self.density_head.offset + self.density_head.dense.param_len()],
            &mut grad_from_density,
        );
        add_assign(&mut grad_trunk_out, &grad_from_density);

        // Trunk backward.
        let mut grad_trunk_block = vec![0.0; b * trunk_in_dim];
        let mut grad_cur = grad_trunk_out;
        for i in (0..self.trunk.len()).rev() {
            let layer = &self.trunk[i];
            smooth_relu_backward_inplace(&cache.trunk_preacts[i], &mut grad_cur);
            let mut grad_in = vec![0.0; b * layer.dense.in_dim];
            layer.dense.backward(
                self.layer_params(layer),
                &cache.trunk_inputs[i],
                &grad_cur,
                b,
                &mut grad_params[layer.offset..layer.offset + layer.dense.param_len()],
                &mut grad_in,
            );
            match layer.kind {
                LayerKind::Plain => grad_cur = grad_in,
                LayerKind::Skip => {
                    let (prev, injected) =
                        split_rows(&grad_in, cfg.trunk_width, cfg.trunk_width + trunk_in_dim, b);
                    add_assign(&mut grad_trunk_block, &injected);
                    grad_cur = prev;
                }
            }
        }
        add_assign(&mut grad_trunk_block, &grad_cur);

        // Reassemble per-row input gradients: [feature | dist | view].
        let total = cfg.input_dim();
        let mut inputs = vec![0.0; b * total];
        for row in 0..b {
            inputs[row * total..row * total + trunk_in_dim]
                .copy_from_slice(&grad_trunk_block[row * trunk_in_dim..(row + 1) * trunk_in_dim]);
            inputs[row * total + trunk_in_dim..(row + 1) * total]
                .copy_from_slice(&grad_encoded_view[row * view_dim..(row + 1) * view_dim]);
        }
        FieldGrads { params: grad_params, inputs }
    }
}

fn concat_rows(a: &[f64], a_dim: usize, b: &[f64], b_dim: usize, rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * (a_dim + b_dim)];
    for row in 0..rows {
        let dst = &mut out[row * (a_dim + b_dim)..(row + 1) * (a_dim + b_dim)];
        dst[..a_dim].copy_from_slice(&a[row * a_dim..(row + 1) * a_dim]);
        dst[a_dim..].copy_from_slice(&b[row * b_dim..(row + 1) * b_dim]);
    }
    out
}

fn split_rows(joint: &[f64], a_dim: usize, total_dim: usize, rows: usize) -> (Vec<f64>, Vec<f64>) {
    let b_dim = total_dim - a_dim;
    let mut a = vec![0.0; rows * a_dim];
    let mut b = vec![0.0; rows * b_dim];
    for row in 0..rows {
        let src = &joint[row * total_dim..(row + 1) * total_dim];
        a[row * a_dim..(row + 1) * a_dim].copy_from_slice(&src[..a_dim]);
        b[row * b_dim..(row + 1) * b_dim].copy_from_slice(&src[a_dim..]);
    }
    (a, b)
}

fn add_assign(acc: &mut [f64], inc: &[f64]) {
    debug_assert_eq!(acc.len(), inc.len());
    for (a, &i) in acc.iter_mut().zip(inc.iter()) {
        *a += i;
    }
}

/// Single-sample field evaluation per the public operation contract.
pub fn eval_field(mlp: &RadianceMlp, input: &FieldInput) -> Result<([f64; 3], f64), FieldError> {
    let cfg = &mlp.config;
    if input.surface_feature.len() != cfg.feature_dim
        || input.encoded_distance.len() != cfg.distance_dim()
        || input.encoded_view.len() != cfg.view_dim()
    {
        return Err(FieldError::ShapeMismatch(format!(
            "expected dims ({}, {}, {}), got ({}, {}, {})",
            cfg.feature_dim,
            cfg.distance_dim(),
            cfg.view_dim(),
            input.surface_feature.len(),
            input.encoded_distance.len(),
            input.encoded_view.len()
        )));
    }
    if !input.is_finite() {
        return Err(FieldError::NonFiniteInput);
    }
    let mut batch = FieldBatch::with_capacity(cfg, 1);
    batch.push(&input.surface_feature, &input.encoded_distance, &input.encoded_view);
    let (rgb, sigma, _) = mlp.forward_batch(&batch, false);
    Ok(([rgb[0], rgb[1], rgb[2]], sigma[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> RadianceMlpConfig {
        RadianceMlpConfig {
            feature_dim: 4,
            distance_frequencies: 3,
            view_frequencies: 2,
            trunk_depth: 6,
            trunk_width: 12,
            view_depth: 6,
            view_width: 8,
            skip_every: 4,
        }
    }

    fn random_input<R: Rng>(cfg: &RadianceMlpConfig, rng: &mut R) -> FieldInput {
        FieldInput {
            surface_feature: (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            encoded_distance: (0..cfg.distance_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            encoded_view: (0..cfg.view_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn positional_encoding_zero_is_sin_cos_pairs() {
        let spec = PositionalEncodingSpec::new(1, false);
        let mut out = Vec::new();
        positional_encoding(&[0.0], &spec, &mut out);
        assert_eq!(out, vec![0.0, 1.0]);
    }

    #[test]
    fn positional_encoding_dimension_contract() {
        let spec = PositionalEncodingSpec::new(10, false);
        let mut out = Vec::new();
        positional_encoding(&[0.3], &spec, &mut out);
        assert_eq!(out.len(), 20);
        assert_eq!(spec.output_dim(3), 60);
        let with_raw = PositionalEncodingSpec::new(4, true);
        assert_eq!(with_raw.output_dim(3), 27);
    }

    #[test]
    fn positional_encoding_closed_form() {
        let spec = PositionalEncodingSpec::new(2, false);
        let mut out = Vec::new();
        positional_encoding(&[0.5], &spec, &mut out);
        let expect = [1.0, 0.0, 0.0, -1.0]; // sin(pi/2), cos(pi/2), sin(pi), cos(pi)
        for (o, e) in out.iter().zip(expect.iter()) {
            assert!((o - e).abs() < 1e-15, "{out:?}");
        }
    }

    #[test]
    fn positional_encoding_injective_on_principal_domain() {
        // (sin(pi p), cos(pi p)) recovers pi*p on (-pi, pi), so the first
        // frequency already separates points; check strict monotonicity of
        // the recovered angle over a fine grid.
        let spec = PositionalEncodingSpec::new(1, false);
        let mut prev = f64::NEG_INFINITY;
        let mut out = Vec::new();
        let steps = 4001;
        for i in 0..steps {
            let p = -1.0 + 2.0 * (i as f64 + 0.5) / steps as f64;
            positional_encoding(&[p], &spec, &mut out);
            let angle = crate::math::flt::atan2(out[0], out[1]);
            assert!(angle > prev, "encoding failed to separate neighbors at p={p}");
            prev = angle;
        }
    }

    #[test]
    fn bilinear_constant_texture_is_fixed_point() {
        let tex = FeatureTexture::constant(7, 5, &[0.3, -1.2, 4.5]);
        let mut out = vec![0.0; 3];
        for uv in [[0.0, 0.0], [0.51, 0.49], [1.0, 1.0], [0.13, 0.87]] {
            sample_feature_texture(&tex, uv, &mut out);
            assert!((out[0] - 0.3).abs() < 1e-12);
            assert!((out[1] + 1.2).abs() < 1e-12);
            assert!((out[2] - 4.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_texel_center_returns_exact_texel() {
        let mut tex = FeatureTexture::zeros(4, 4, 2);
        for (i, t) in tex.texels.iter_mut().enumerate() {
            *t = i as f64;
        }
        let mut out = vec![0.0; 2];
        let (row, col) = (2usize, 1usize);
        let uv = [(col as f64 + 0.5) / 4.0, (row as f64 + 0.5) / 4.0];
        sample_feature_texture(&tex, uv, &mut out);
        assert_eq!(out[0], tex.texel(row, col)[0]);
        assert_eq!(out[1], tex.texel(row, col)[1]);
    }

    #[test]
    fn bilinear_midpoint_of_2x2_is_mean() {
        let mut tex = FeatureTexture::zeros(2, 2, 1);
        tex.texels = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 1];
        sample_feature_texture(&tex, [0.5, 0.5], &mut out);
        assert!((out[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_weights_partition_unity() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (corners, w) =
                bilinear_footprint(9, 6, [rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2)]);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(corners.iter().all(|&(r, c)| r < 6 && c < 9));
        }
    }

    #[test]
    fn bilinear_backward_touches_only_footprint() {
        let mut grad = vec![0.0; 8 * 8 * 2];
        sample_feature_texture_backward(8, 8, 2, [0.3, 0.7], &[1.0, 2.0], &mut grad);
        let touched = grad.iter().filter(|&&g| g != 0.0).count();
        assert!(touched <= 8, "at most 4 texels x 2 channels, got {touched}");
        // A texel far from the footprint stays zero.
        assert_eq!(grad[7 * 2], 0.0);
    }

    #[test]
    fn grid_encoder_starts_all_zero_with_shape() {
        let enc = FeatureEncoder::Grid(GridEncoder::new(16, 16, 32));
        let tex = enc.encode(None).unwrap();
        assert_eq!((tex.width, tex.height, tex.channels), (16, 16, 32));
        assert!(tex.texels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_encoder_zero_output_layer_gives_zero_texture() {
        let stack = TextureStack { maps: vec![FeatureTexture::constant(8, 8, &[0.2, 0.4, 0.6]); 3] };
        let enc = FeatureEncoder::Conv(ConvEncoder::new(8, 8, 9, 5, 3).unwrap());
        let tex = enc.encode(Some(&stack)).unwrap();
        assert_eq!((tex.width, tex.height, tex.channels), (8, 8, 5));
        assert!(tex.texels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_encoder_rejects_wrong_channel_count() {
        let stack = TextureStack { maps: vec![FeatureTexture::constant(8, 8, &[0.1, 0.1, 0.1]); 2] };
        let enc = FeatureEncoder::Conv(ConvEncoder::new(8, 8, 9, 4, 3).unwrap());
        assert!(matches!(enc.encode(Some(&stack)), Err(FieldError::ShapeMismatch(_))));
    }

    #[test]
    fn conv_encoder_gradients_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let stack = TextureStack {
            maps: (0..2)
                .map(|_| {
                    let mut t = FeatureTexture::zeros(8, 8, 3);
                    for v in t.texels.iter_mut() {
                        *v = rng.gen_range(0.0..1.0);
                    }
                    t
                })
                .collect(),
        };
        let mut enc = FeatureEncoder::Conv(ConvEncoder::new(8, 8, 6, 4, 9).unwrap());
        // Randomize all layers including the zero-initialized output conv.
        for p in enc.params_mut().iter_mut() {
            *p += rng.gen_range(-0.2..0.2);
        }
        let tex0 = enc.encode(Some(&stack)).unwrap();
        let readout_w: Vec<f64> = (0..tex0.texels.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |enc: &FeatureEncoder| -> f64 {
            let t = enc.encode(Some(&stack)).unwrap();
            t.texels.iter().zip(readout_w.iter()).map(|(a, b)| a * b).sum()
        };
        let grads = enc.encode_backward(Some(&stack), &readout_w).unwrap();
        let h = 1e-4;
        for _ in 0..20 {
            let probe = rng.gen_range(0..enc.param_len());
            let orig = enc.params()[probe];
            enc.params_mut()[probe] = orig + h;
            let fp = loss(&enc);
            enc.params_mut()[probe] = orig - h;
            let fm = loss(&enc);
            enc.params_mut()[probe] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[probe];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom <= 1e-4, "param {probe}: fd {fd} an {an}");
        }
    }

    #[test]
    fn eval_field_output_ranges() {
        use rand::SeedableRng;
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let mlp = RadianceMlp::new(cfg, trial);
            for _ in 0..50 {
                let input = random_input(&cfg, &mut rng);
                let (c, sigma) = eval_field(&mlp, &input).unwrap();
                assert!(sigma >= 0.0);
                assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn density_is_exactly_view_independent() {
        use rand::SeedableRng;
        let cfg = tiny_config();
        let mlp = RadianceMlp::new(cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut input = random_input(&cfg, &mut rng);
            let (_, sigma_a) = eval_field(&mlp, &input).unwrap();
            for v in input.encoded_view.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let (_, sigma_b) = eval_field(&mlp, &input).unwrap();
            assert_eq!(sigma_a, sigma_b);
        }
    }

    #[test]
    fn eval_field_rejects_non_finite_and_wrong_shape() {
        let cfg = tiny_config();
        let mlp = RadianceMlp::new(cfg, 0);
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut input = random_input(&cfg, &mut rng);
        input.encoded_distance[0] = f64::NAN;
        assert!(matches!(eval_field(&mlp, &input), Err(FieldError::NonFiniteInput)));
        let mut input = random_input(&cfg, &mut rng);
        input.surface_feature.pop();
        assert!(matches!(eval_field(&mlp, &input), Err(FieldError::ShapeMismatch(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        use rand::SeedableRng;
        let cfg = tiny_config();
        let mlp = RadianceMlp::new(cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_input(&cfg, &mut rng);
        let a = eval_field(&mlp, &input).unwrap();
        let b = eval_field(&mlp, &input).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn field_backward_zero_upstream_gives_zero_grads() {
        use rand::SeedableRng;
        let cfg = tiny_config();
        let mlp = RadianceMlp::new(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut batch = FieldBatch::with_capacity(&cfg, 2);
        for _ in 0..2 {
            let i = random_input(&cfg, &mut rng);
            batch.push(&i.surface_feature, &i.encoded_distance, &i.encoded_view);
        }
        let (_, _, cache) = mlp.forward_batch(&batch, true);
        let grads = mlp.backward_batch(cache.as_ref().unwrap(), &[0.0; 6], &[0.0; 2]);
        assert!(grads.params.iter().all(|&g| g == 0.0));
        assert!(grads.inputs.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn field_gradients_match_finite_differences() {
        use rand::SeedableRng;
        let cfg = tiny_config();
        let mut mlp = RadianceMlp::new(cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let b = 3usize;
        let mut batch = FieldBatch::with_capacity(&cfg, b);
        for _ in 0..b {
            let i = random_input(&cfg, &mut rng);
            batch.push(&i.surface_feature, &i.encoded_distance, &i.encoded_view);
        }
        // Scalar loss mixing colors and densities.
        let wc: Vec<f64> = (0..b * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |mlp: &RadianceMlp, batch: &FieldBatch| -> f64 {
            let (rgb, sigma, _) = mlp.forward_batch(batch, false);
            rgb.iter().zip(wc.iter()).map(|(a, b)| a * b).sum::<f64>()
                + sigma.iter().zip(ws.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, _, cache) = mlp.forward_batch(&batch, true);
        let grads = mlp.backward_batch(cache.as_ref().unwrap(), &wc, &ws);

        let h = 1e-4;
        for _ in 0..20 {
            let probe = rng.gen_range(0..mlp.param_len());
            let orig = mlp.params()[probe];
            mlp.params_mut()[probe] = orig + h;
            let fp = loss(&mlp, &batch);
            mlp.params_mut()[probe] = orig - h;
            let fm = loss(&mlp, &batch);
            mlp.params_mut()[probe] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.params[probe];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom <= 1e-4, "param {probe}: fd {fd} an {an}");
        }
        for _ in 0..20 {
            let probe = rng.gen_range(0..batch.data.len());
            let orig = batch.data[probe];
            batch.data[probe] = orig + h;
            let fp = loss(&mlp, &batch);
            batch.data[probe] = orig - h;
            let fm = loss(&mlp, &batch);
            batch.data[probe] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.inputs[probe];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom <= 1e-4, "input {probe}: fd {fd} an {an}");
        }
    }

    #[test]
    fn default_config_matches_production_values() {
        let cfg = RadianceMlpConfig::default();
        assert_eq!(cfg.trunk_depth, 16);
        assert_eq!(cfg.trunk_width, 128);
        assert_eq!(cfg.view_depth, 16);
        assert_eq!(cfg.view_width, 64);
        assert_eq!(cfg.skip_every, 4);
        assert_eq!(cfg.distance_frequencies, 10);
        assert_eq!(cfg.view_frequencies, 4);
        assert_eq!(cfg.feature_dim, 32);
        assert_eq!(cfg.trunk_input_dim(), 52);
        assert_eq!(cfg.view_input_dim(), 152);
    }
}
