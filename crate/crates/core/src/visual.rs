//! Visual feature handling: adapters into the model token space, 25 fps to
//! 50 Hz duplication, and the residual audio-visual fusion step.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, Affine};

pub const FEATURE_FPS: u32 = 25;

/// Per-video lip and face feature streams at 25 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStreams {
    pub lip: Array2<f64>,
    pub face: Array2<f64>,
}

impl FeatureStreams {
    pub fn new(lip: Array2<f64>, face: Array2<f64>) -> Result<Self> {
        if lip.nrows() != face.nrows() {
            return Err(Error::validation(format!(
                "lip rows {} != face rows {}",
                lip.nrows(),
                face.nrows()
            )));
        }
        if lip.nrows() == 0 {
            return Err(Error::validation("feature streams must be non-empty"));
        }
        if lip.iter().chain(face.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("feature streams contain non-finite values"));
        }
        Ok(FeatureStreams { lip, face })
    }

    /// Number of video frames M.
    pub fn num_frames(&self) -> usize {
        self.lip.nrows()
    }

    pub fn fps(&self) -> u32 {
        FEATURE_FPS
    }
}

/// Two-layer MLP with GELU mapping a feature stream into the token space.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w1: Affine,
    pub w2: Affine,
}

impl AdapterParams {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_model: usize, std: f64) -> Self {
        AdapterParams {
            w1: Affine::init(rng, d_in, hidden, std),
            w2: Affine::init(rng, hidden, d_model, std),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, d_model: usize) -> Self {
        AdapterParams {
            w1: Affine::zeros(d_in, hidden),
            w2: Affine::zeros(hidden, d_model),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.n_in()
    }
}

/// The two fusion maps of the residual audio-visual fusion. `face_fuse` is
/// absent in the lip-only variant and may be exactly zero right after staged
/// initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub lip_fuse: Affine,
    pub face_fuse: Option<Affine>,
}

impl FusionParams {
    pub fn zeros(d_model: usize, with_face: bool) -> Self {
        FusionParams {
            lip_fuse: Affine::zeros(2 * d_model, d_model),
            face_fuse: with_face.then(|| Affine::zeros(2 * d_model, d_model)),
        }
    }
}

/// Row-wise affine -> GELU -> affine.
pub fn adapt(features: &Array2<f64>, params: &AdapterParams) -> Result<Array2<f64>> {
    if features.ncols() != params.d_in() {
        return Err(Error::validation(format!(
            "feature dim {} does not match adapter input {}",
            features.ncols(),
            params.d_in()
        )));
    }
    let h = params.w1.forward(features).mapv(gelu);
    Ok(params.w2.forward(&h))
}

pub struct AdaptCache {
    features: Array2<f64>,
    f1: Array2<f64>,
    h: Array2<f64>,
}

pub fn adapt_with_cache(
    features: &Array2<f64>,
    params: &AdapterParams,
) -> Result<(Array2<f64>, AdaptCache)> {
    if features.ncols() != params.d_in() {
        return Err(Error::validation("feature dim mismatch"));
    }
    let f1 = params.w1.forward(features);
    let h = f1.mapv(gelu);
    let out = params.w2.forward(&h);
    Ok((
        out,
        AdaptCache {
            features: features.clone(),
            f1,
            h,
        },
    ))
}

pub fn adapt_backward(dy: &Array2<f64>, cache: &AdaptCache, params: &AdapterParams, grad: &mut AdapterParams) {
    let dh = params.w2.backward(&cache.h, dy, &mut grad.w2);
    let df1 = &dh * &cache.f1.mapv(gelu_grad);
    let _ = params.w1.backward(&cache.features, &df1, &mut grad.w1);
}

/// Duplicate each row consecutively: [x, y] -> [x, x, y, y]. Takes 25 fps
/// features to the 50 Hz token rate.
pub fn upsample_2x(tokens: &Array2<f64>) -> Result<Array2<f64>> {
    if tokens.nrows() == 0 {
        return Err(Error::validation("cannot upsample an empty stream"));
    }
    let mut out = Array2::zeros((2 * tokens.nrows(), tokens.ncols()));
    for (m, row) in tokens.rows().into_iter().enumerate() {
        out.row_mut(2 * m).assign(&row);
        out.row_mut(2 * m + 1).assign(&row);
    }
    Ok(out)
}

/// Residual fusion at canonical timestep `t`: reads the visual rows at the
/// lookahead index min(t+1, T-1) and adds the fusion outputs to the token.
pub fn fuse_step(
    h_tgt: &Array1<f64>,
    lip_tokens: &Array2<f64>,
    face_tokens: Option<&Array2<f64>>,
    t: usize,
    params: &FusionParams,
) -> Result<Array1<f64>> {
    let t_len = lip_tokens.nrows();
    if t >= t_len {
        return Err(Error::validation(format!(
            "fuse_step index {t} out of range for {t_len} frames"
        )));
    }
    let look = (t + 1).min(t_len - 1);
    let lip_row = lip_tokens.row(look);
    let cat = concatenate![Axis(0), h_tgt.view(), lip_row];
    let mut out = h_tgt + &params.lip_fuse.forward_row(&cat);
    if let Some(face_fuse) = &params.face_fuse {
        let face_tokens = face_tokens.ok_or_else(|| {
            Error::validation("face fusion parameters present but face tokens absent")
        })?;
        if face_tokens.nrows() != t_len {
            return Err(Error::validation("face token length mismatch"));
        }
        let cat = concatenate![Axis(0), h_tgt.view(), face_tokens.row(look)];
        out += &face_fuse.forward_row(&cat);
    }
    Ok(out)
}

/// Backward through `fuse_step`. Returns d(h_tgt); accumulates fusion
/// parameter gradients and the gradients w.r.t. the visual rows actually read.
#[allow(clippy::too_many_arguments)]
pub fn fuse_step_backward(
    d_out: &Array1<f64>,
    h_tgt: &Array1<f64>,
    lip_tokens: &Array2<f64>,
    face_tokens: Option<&Array2<f64>>,
    t: usize,
    params: &FusionParams,
    grad: &mut FusionParams,
    d_lip_tokens: &mut Array2<f64>,
    d_face_tokens: Option<&mut Array2<f64>>,
) -> Array1<f64> {
    let t_len = lip_tokens.nrows();
    let look = (t + 1).min(t_len - 1);
    let d = h_tgt.len();

    let mut d_h = d_out.clone();
    {
        let cat = concatenate![Axis(0), h_tgt.view(), lip_tokens.row(look)];
        // d cat = d_out . w^T ; dW = cat^T . d_out (outer product).
        let d_cat = params.lip_fuse.w.dot(d_out);
        for i in 0..2 * d {
            for j in 0..d {
                grad.lip_fuse.w[[i, j]] += cat[i] * d_out[j];
            }
        }
        grad.lip_fuse.b += d_out;
        d_h += &d_cat.slice(s![..d]);
        let mut lip_row = d_lip_tokens.row_mut(look);
        lip_row += &d_cat.slice(s![d..]);
    }
    if let (Some(face_fuse), Some(face_tokens), Some(d_face)) =
        (&params.face_fuse, face_tokens, d_face_tokens)
    {
        let face_grad = grad
            .face_fuse
            .as_mut()
            .expect("gradient mirror has face fusion");
        let cat = concatenate![Axis(0), h_tgt.view(), face_tokens.row(look)];
        let d_cat = face_fuse.w.dot(d_out);
        for i in 0..2 * d {
            for j in 0..d {
                face_grad.w[[i, j]] += cat[i] * d_out[j];
            }
        }
        face_grad.b += d_out;
        d_h += &d_cat.slice(s![..d]);
        let mut face_row = d_face.row_mut(look);
        face_row += &d_cat.slice(s![d..]);
    }
    d_h
}
