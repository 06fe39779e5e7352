//! Token-to-frame alignment: monotonic alignment search over a log-likelihood
//! matrix, a convolutional duration predictor trained against the searched
//! durations, and length regulation expanding per-token vectors into the
//! initial mel representation.

use crate::error::{Error, Result};
use crate::tensor::{NormKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{init, NORM_EPS};
use rand_chacha::ChaCha8Rng;

/// Hard monotonic surjective token→frame map stored as per-token durations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    durations: Vec<usize>,
}

impl AlignmentPath {
    /// Durations must all be ≥ 1 (every token owns at least one frame).
    pub fn new(durations: Vec<usize>) -> Result<Self> {
        if durations.is_empty() || durations.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "alignment durations must be positive, got {durations:?}"
            )));
        }
        Ok(Self { durations })
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.durations.len()
    }
}

/// Per-(token, frame) log-likelihoods; rows are tokens, columns frames.
#[derive(Clone, Debug)]
pub struct LikelihoodMatrix {
    values: Tensor,
}

impl LikelihoodMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!(
                "likelihood matrix must be rank 2, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("likelihood matrix"));
        }
        Ok(Self { values })
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    fn at(&self, token: usize, frame: usize) -> f64 {
        self.values.data()[token * self.frames() + frame]
    }
}

/// Unit-variance Gaussian log-likelihood (up to its constant) of each frame
/// under each token's predicted mel-space center: −‖μ_i − x_j‖²/2.
pub fn mas_likelihoods(centers: &Tensor, mel: &Tensor) -> Result<LikelihoodMatrix> {
    if centers.rank() != 2 || mel.rank() != 2 || centers.shape()[1] != mel.shape()[0] {
        return Err(Error::Shape(format!(
            "centers {:?} vs mel {:?}",
            centers.shape(),
            mel.shape()
        )));
    }
    let (tokens, bins) = (centers.shape()[0], centers.shape()[1]);
    let frames = mel.shape()[1];
    let mut ll = vec![0.0; tokens * frames];
    for i in 0..tokens {
        for j in 0..frames {
            let mut d2 = 0.0;
            for f in 0..bins {
                let diff = centers.data()[i * bins + f] - mel.data()[f * frames + j];
                d2 += diff * diff;
            }
            ll[i * frames + j] = -0.5 * d2;
        }
    }
    LikelihoodMatrix::new(Tensor::new(vec![tokens, frames], ll)?)
}

/// Monotonic alignment search: the dynamic program
/// Q[i, j] = ll[i, j] + max(Q[i, j−1], Q[i−1, j−1]) with ties preferring to
/// stay on the current token, then a backtrack counting frames per token.
pub fn mas_align(ll: &LikelihoodMatrix) -> Result<AlignmentPath> {
    let (tokens, frames) = (ll.tokens(), ll.frames());
    if frames < tokens {
        return Err(Error::Infeasible(format!(
            "{frames} frames cannot cover {tokens} tokens"
        )));
    }
    const NEG: f64 = f64::NEG_INFINITY;
    let mut q = vec![NEG; tokens * frames];
    for i in 0..tokens {
        // feasible band: token i needs i prior frames and tokens−1−i later ones
        for j in i..=(frames - tokens + i) {
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let stay = if j > 0 { q[i * frames + j - 1] } else { NEG };
                let advance = if i > 0 && j > 0 { q[(i - 1) * frames + j - 1] } else { NEG };
                stay.max(advance)
            };
            if best_prev > NEG {
                q[i * frames + j] = ll.at(i, j) + best_prev;
            }
        }
    }
    let mut durations = vec![0usize; tokens];
    let mut i = tokens - 1;
    let mut j = frames - 1;
    loop {
        durations[i] += 1;
        if j == 0 {
            break;
        }
        if i > 0 {
            let stay = q[i * frames + j - 1];
            let advance = q[(i - 1) * frames + j - 1];
            // prefer staying on the current token when tied
            if advance > stay {
                i -= 1;
            }
        }
        j -= 1;
    }
    let path = AlignmentPath::new(durations)?;
    assert_eq!(
        path.total_frames(),
        frames,
        "alignment must cover every frame exactly once"
    );
    assert_eq!(path.num_tokens(), tokens);
    Ok(path)
}

/// Total log-likelihood collected along a path.
pub fn path_score(ll: &LikelihoodMatrix, path: &AlignmentPath) -> f64 {
    let mut score = 0.0;
    let mut frame = 0;
    for (token, &d) in path.durations().iter().enumerate() {
        for _ in 0..d {
            score += ll.at(token, frame);
            frame += 1;
        }
    }
    score
}

/// Two same-padded conv blocks (kernel 3) with activation and layer norm,
/// then an affine projection to one log-duration per token. The input is
/// detached so the duration loss cannot reach the text encoder.
pub struct DurationPredictor {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    width: usize,
}

impl DurationPredictor {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1_w: store.register("durpred.conv1_w", init::conv(&[width, width, 3], rng))?,
            conv1_b: store.register("durpred.conv1_b", init::zeros(&[1, width]))?,
            conv2_w: store.register("durpred.conv2_w", init::conv(&[width, width, 3], rng))?,
            conv2_b: store.register("durpred.conv2_b", init::zeros(&[1, width]))?,
            proj_w: store.register("durpred.proj_w", init::linear(&[width, 1], rng))?,
            proj_b: store.register("durpred.proj_b", init::zeros(&[1, 1]))?,
            width,
        })
    }

    fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        // x: [L×C] token-major; convolve along the token axis
        let xt = tape.transpose2(x)?;
        let w = tape.param(store, w);
        let y = tape.conv1d(xt, w, 1, 1)?;
        let y = tape.transpose2(y)?;
        let b = tape.param(store, b);
        let y = tape.broadcast_add(y, b)?;
        let y = tape.swish(y)?;
        tape.normalize(y, NormKind::Layer, NORM_EPS)
    }

    /// Predicted log-durations, one scalar per token, shape [L×1].
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, h_text: Var) -> Result<Var> {
        if tape.shape(h_text).len() != 2 || tape.shape(h_text)[1] != self.width {
            return Err(Error::Shape(format!(
                "duration predictor wants [L×{}], got {:?}",
                self.width,
                tape.shape(h_text)
            )));
        }
        let x = tape.detach(h_text);
        let x = self.block(tape, store, x, self.conv1_w, self.conv1_b)?;
        let x = self.block(tape, store, x, self.conv2_w, self.conv2_b)?;
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        tape.linear(x, w, b)
    }
}

/// Rounds predicted log-durations to usable frame counts: max(1, round(eˡ)).
pub fn durations_from_log(log_durations: &Tensor) -> Result<AlignmentPath> {
    let durations: Vec<usize> = log_durations
        .data()
        .iter()
        .map(|&l| l.exp().round().max(1.0) as usize)
        .collect();
    AlignmentPath::new(durations)
}

/// Repeats each token's row by its duration: [L×F] rows plus durations give
/// the frame-major matrix [F×T] with T = Σ durations.
pub fn length_regulate(tape: &mut Tape, token_rows: Var, path: &AlignmentPath) -> Result<Var> {
    let shape = tape.shape(token_rows).to_vec();
    if shape.len() != 2 || shape[0] != path.num_tokens() {
        return Err(Error::Shape(format!(
            "length_regulate: rows {:?} vs {} durations",
            shape,
            path.num_tokens()
        )));
    }
    if path.total_frames() == 0 {
        return Err(Error::Contract("zero total duration".into()));
    }
    let mut indices = Vec::with_capacity(path.total_frames());
    for (token, &d) in path.durations().iter().enumerate() {
        indices.extend(std::iter::repeat(token).take(d));
    }
    let expanded = tape.gather_rows(token_rows, &indices)?; // [T×F]
    tape.transpose2(expanded)
}

/// Mean squared error between the expanded representation and the target mel.
pub fn prior_loss(tape: &mut Tape, expanded: Var, mel: Var) -> Result<Var> {
    if tape.shape(expanded) != tape.shape(mel) {
        return Err(Error::Shape(format!(
            "prior loss shapes {:?} vs {:?}",
            tape.shape(expanded),
            tape.shape(mel)
        )));
    }
    tape.mse(expanded, mel)
}
