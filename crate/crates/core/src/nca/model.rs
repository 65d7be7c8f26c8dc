use ndarray::{s, Array2, Axis};

use super::grid::{downscale, upscale_and_concat, upscale_and_concat_backward, Image, StateGrid};
use super::loss::Logits;
use super::perceive::{perceive, perceive_adjoint};
use super::{GradReduction, ModelConfig, NcaWeights, Real, TwoStageModel};
use crate::error::{Error, Result};

/// SplitMix64 finalizer; the counter-based source behind fire masks.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-cell fire decisions for global step `step`, a pure function of
/// `(seed, step, pixel)`.
pub fn fire_mask(seed: u64, step: usize, pixels: usize, fire_rate: f64, deterministic: bool) -> Vec<bool> {
    if deterministic {
        return vec![true; pixels];
    }
    let key = mix64(seed ^ mix64(step as u64 ^ 0xF1_2E_00_00));
    (0..pixels)
        .map(|p| {
            let bits = mix64(key ^ mix64(p as u64));
            ((bits >> 11) as f64 / (1u64 << 53) as f64) < fire_rate
        })
        .collect()
}

/// Intermediate activations of one cell-rule application.
struct Activations<T> {
    perception: Array2<T>,
    pre_relu: Array2<T>,
    hidden: Array2<T>,
}

fn activations<T: Real>(weights: &NcaWeights<T>, state: &StateGrid<T>) -> Activations<T> {
    let perception = perceive(&state.data, state.height, state.width);
    let mut pre_relu = perception.dot(&weights.w1.t());
    pre_relu += &weights.b1;
    let hidden = pre_relu.mapv(|v| v.max(T::zero()));
    Activations { perception, pre_relu, hidden }
}

fn check_step_inputs<T: Real>(weights: &NcaWeights<T>, state: &StateGrid<T>, fire_mask: &[bool], c_in: usize) -> Result<()> {
    if weights.channels() != state.channels() || weights.w1.ncols() != 3 * state.channels() {
        return Err(Error::config(format!(
            "weights expect {} channels, state has {}",
            weights.channels(),
            state.channels()
        )));
    }
    if fire_mask.len() != state.pixels() {
        return Err(Error::precondition(format!(
            "fire mask has {} cells, state {}",
            fire_mask.len(),
            state.pixels()
        )));
    }
    if c_in >= state.channels() {
        return Err(Error::config("c_in must leave at least one writable channel"));
    }
    Ok(())
}

/// One residual cell update. Cells with a false mask entry keep their state,
/// and the first `c_in` (image) channels are never written.
pub fn nca_step<T: Real>(
    weights: &NcaWeights<T>,
    state: &StateGrid<T>,
    fire_mask: &[bool],
    c_in: usize,
) -> Result<StateGrid<T>> {
    check_step_inputs(weights, state, fire_mask, c_in)?;
    let act = activations(weights, state);
    let mut update = act.hidden.dot(&weights.w2.t());
    update += &weights.b2;
    let mut next = state.clone();
    for (p, fired) in fire_mask.iter().enumerate() {
        if *fired {
            let mut row = next.data.slice_mut(s![p, c_in..]);
            row += &update.slice(s![p, c_in..]);
        }
    }
    Ok(next)
}

/// State entering one step plus the fire mask that step used.
#[derive(Debug, Clone)]
pub struct StepRecord<T> {
    pub state: StateGrid<T>,
    pub fire_mask: Vec<bool>,
}

/// Everything the reverse pass needs: `t0` coarse records, the junction
/// geometry and `t1` fine records.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub coarse: Vec<StepRecord<T>>,
    pub junction: Junction,
    pub fine: Vec<StepRecord<T>>,
    pub deterministic: bool,
    channels: usize,
    c_in: usize,
    c_out: usize,
    hidden_units: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Junction {
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub factor: usize,
}

impl<T> Tape<T> {
    /// Number of step records (`t0 + t1`); the junction is stored separately.
    pub fn steps(&self) -> usize {
        self.coarse.len() + self.fine.len()
    }
}

/// Runs both stages. Fire masks are drawn from `(rng_seed, global step)`;
/// `deterministic` fires every cell on every step.
pub fn forward<T: Real>(
    model: &TwoStageModel<T>,
    image: &Image<T>,
    rng_seed: u64,
    deterministic: bool,
) -> Result<(Logits<T>, Tape<T>)> {
    let cfg = &model.config;
    cfg.validate_allowing_empty_stages()?;
    model.theta.check_shape(cfg)?;
    model.omega.check_shape(cfg)?;
    if image.channels() != cfg.c_in {
        return Err(Error::config(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            cfg.c_in
        )));
    }

    let coarse_image = downscale(image, cfg.downscale_factor)?;
    let mut state = StateGrid::seeded(&coarse_image, cfg.channels)?;
    let mut coarse = Vec::with_capacity(cfg.t0);
    for step in 0..cfg.t0 {
        let mask = fire_mask(rng_seed, step, state.pixels(), cfg.fire_rate, deterministic);
        let next = nca_step(&model.theta, &state, &mask, cfg.c_in)?;
        coarse.push(StepRecord { state, fire_mask: mask });
        state = next;
    }

    let junction = Junction {
        coarse_height: state.height,
        coarse_width: state.width,
        factor: cfg.downscale_factor,
    };
    state = upscale_and_concat(&state, image, cfg.downscale_factor)?;

    let mut fine = Vec::with_capacity(cfg.t1);
    for step in 0..cfg.t1 {
        let mask = fire_mask(rng_seed, cfg.t0 + step, state.pixels(), cfg.fire_rate, deterministic);
        let next = nca_step(&model.omega, &state, &mask, cfg.c_in)?;
        fine.push(StepRecord { state, fire_mask: mask });
        state = next;
    }

    let logits = Logits {
        height: state.height,
        width: state.width,
        data: state.data.slice(s![.., cfg.c_in..cfg.c_in + cfg.c_out]).to_owned(),
    };
    let tape = Tape {
        coarse,
        junction,
        fine,
        deterministic,
        channels: cfg.channels,
        c_in: cfg.c_in,
        c_out: cfg.c_out,
        hidden_units: cfg.hidden_units,
    };
    Ok((logits, tape))
}

/// Gradients of the loss with respect to θ and ω.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub theta: NcaWeights<T>,
    pub omega: NcaWeights<T>,
}

/// Reverse pass through one step. Accumulates weight gradients into `grads`
/// and returns the gradient with respect to the step's input state.
fn step_backward<T: Real>(
    weights: &NcaWeights<T>,
    record: &StepRecord<T>,
    grad_out: &Array2<T>,
    c_in: usize,
    grads: &mut NcaWeights<T>,
) -> Array2<T> {
    let state = &record.state;
    let act = activations(weights, state);

    // Gradient reaching the additive update: masked cells and image channels
    // contribute nothing.
    let mut d_update = grad_out.clone();
    d_update.slice_mut(s![.., ..c_in]).fill(T::zero());
    for (p, fired) in record.fire_mask.iter().enumerate() {
        if !fired {
            d_update.row_mut(p).fill(T::zero());
        }
    }

    grads.w2 += &d_update.t().dot(&act.hidden);
    grads.b2 += &d_update.sum_axis(Axis(0));

    let mut d_hidden = d_update.dot(&weights.w2);
    ndarray::Zip::from(&mut d_hidden)
        .and(&act.pre_relu)
        .for_each(|g, &z| {
            if z <= T::zero() {
                *g = T::zero();
            }
        });

    grads.w1 += &d_hidden.t().dot(&act.perception);
    grads.b1 += &d_hidden.sum_axis(Axis(0));

    let d_perception = d_hidden.dot(&weights.w1);
    let mut grad_in = grad_out + &perceive_adjoint(&d_perception, state.height, state.width);
    grad_in.slice_mut(s![.., ..c_in]).fill(T::zero());
    grad_in
}

/// Exact reverse-mode gradients through all unrolled steps and the junction.
/// Per-step weight contributions are summed, or averaged per stage when the
/// model is configured with [`GradReduction::MeanOverSteps`].
pub fn backward_bptt<T: Real>(
    model: &TwoStageModel<T>,
    tape: &Tape<T>,
    dlogits: &Array2<T>,
) -> Result<Gradients<T>> {
    let cfg = &model.config;
    if tape.channels != cfg.channels
        || tape.c_in != cfg.c_in
        || tape.c_out != cfg.c_out
        || tape.hidden_units != cfg.hidden_units
        || tape.coarse.len() != cfg.t0
        || tape.fine.len() != cfg.t1
        || tape.junction.factor != cfg.downscale_factor
    {
        return Err(Error::config("tape was recorded with a different model configuration"));
    }
    let fine_pixels = tape.junction.coarse_height
        * tape.junction.coarse_width
        * tape.junction.factor
        * tape.junction.factor;
    if dlogits.dim() != (fine_pixels, cfg.c_out) {
        return Err(Error::config(format!(
            "dlogits {:?} does not match ({fine_pixels}, {})",
            dlogits.dim(),
            cfg.c_out
        )));
    }

    let mut grad_theta = NcaWeights::zeros(cfg);
    let mut grad_omega = NcaWeights::zeros(cfg);

    let mut grad = Array2::<T>::zeros((fine_pixels, cfg.channels));
    grad.slice_mut(s![.., cfg.c_in..cfg.c_in + cfg.c_out]).assign(dlogits);

    for record in tape.fine.iter().rev() {
        grad = step_backward(&model.omega, record, &grad, cfg.c_in, &mut grad_omega);
    }
    grad = upscale_and_concat_backward(
        &grad,
        tape.junction.coarse_height,
        tape.junction.coarse_width,
        tape.junction.factor,
        cfg.c_in,
    );
    for record in tape.coarse.iter().rev() {
        grad = step_backward(&model.theta, record, &grad, cfg.c_in, &mut grad_theta);
    }

    if cfg.grad_reduction == GradReduction::MeanOverSteps {
        if cfg.t0 > 0 {
            grad_theta.scale_in_place(T::one() / T::from_usize(cfg.t0).unwrap());
        }
        if cfg.t1 > 0 {
            grad_omega.scale_in_place(T::one() / T::from_usize(cfg.t1).unwrap());
        }
    }
    Ok(Gradients { theta: grad_theta, omega: grad_omega })
}

/// Sign pattern of every hidden pre-activation along a recorded forward pass
/// (coarse steps first). Gradient checks use it to detect finite-difference
/// steps that cross a ReLU kink.
pub fn relu_pattern<T: Real>(model: &TwoStageModel<T>, tape: &Tape<T>) -> Vec<bool> {
    let mut out = Vec::new();
    for (weights, records) in [(&model.theta, &tape.coarse), (&model.omega, &tape.fine)] {
        for record in records {
            out.extend(activations(weights, &record.state).pre_relu.iter().map(|&z| z > T::zero()));
        }
    }
    out
}

impl<T: Real> Gradients<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self { theta: NcaWeights::zeros(config), omega: NcaWeights::zeros(config) }
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.theta.add_assign(&other.theta);
        self.omega.add_assign(&other.omega);
    }

    pub fn scale(&mut self, k: T) {
        self.theta.scale_in_place(k);
        self.omega.scale_in_place(k);
    }

    pub fn max_abs(&self) -> T {
        self.theta.max_abs().max(self.omega.max_abs())
    }

    pub fn l2_norm(&self) -> T {
        (self.theta.sum_squares() + self.omega.sum_squares()).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nca::{cross_entropy_loss, flatten, unflatten};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent per-pixel cell rule: explicit kernel loops with replicate
    /// padding and scalar MLP arithmetic, no shared helpers.
    fn oracle_step(w: &NcaWeights<f64>, s: &StateGrid<f64>, mask: &[bool], c_in: usize) -> StateGrid<f64> {
        let (h, wd, c) = (s.height, s.width, s.channels());
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let at = |ch: usize, y: isize, x: isize| {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, wd as isize - 1) as usize;
            s.get(ch, yy, xx)
        };
        let mut out = s.clone();
        for y in 0..h {
            for x in 0..wd {
                let p = y * wd + x;
                if !mask[p] {
                    continue;
                }
                let mut feat = vec![0.0; 3 * c];
                for ch in 0..c {
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let v = at(ch, y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            gx += kx[dy][dx] / 8.0 * v;
                            gy += kx[dx][dy] / 8.0 * v;
                        }
                    }
                    feat[3 * ch] = s.get(ch, y, x);
                    feat[3 * ch + 1] = gx;
                    feat[3 * ch + 2] = gy;
                }
                let hidden: Vec<f64> = (0..w.hidden_units())
                    .map(|j| {
                        let z: f64 = (0..3 * c).map(|i| w.w1[[j, i]] * feat[i]).sum::<f64>() + w.b1[j];
                        z.max(0.0)
                    })
                    .collect();
                for ch in c_in..c {
                    let d: f64 = (0..hidden.len()).map(|j| w.w2[[ch, j]] * hidden[j]).sum::<f64>() + w.b2[ch];
                    out.data[[p, ch]] += d;
                }
            }
        }
        out
    }

    fn random_weights(cfg: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> NcaWeights<f64> {
        let mut w = NcaWeights::zeros(cfg);
        for v in w.w1.iter_mut().chain(w.b1.iter_mut()).chain(w.w2.iter_mut()).chain(w.b2.iter_mut()) {
            *v = rng.random_range(-scale..scale);
        }
        w
    }

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image<f64> {
        let vals: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::from_gray(h, w, &vals).unwrap()
    }

    fn tiny_config(t0: usize, t1: usize) -> ModelConfig {
        ModelConfig {
            channels: 4,
            hidden_units: 6,
            t0,
            t1,
            downscale_factor: 2,
            fire_rate: 0.5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_weights_leave_state_unchanged() {
        let cfg = tiny_config(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = StateGrid::<f64>::zeros(4, 4, 4);
        state.data.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let next = nca_step(&NcaWeights::zeros(&cfg), &state, &[true; 16], 1).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn empty_fire_mask_leaves_state_unchanged() {
        let cfg = tiny_config(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(&cfg, &mut rng, 1.0);
        let mut state = StateGrid::<f64>::zeros(4, 4, 4);
        state.data.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        assert_eq!(nca_step(&w, &state, &[false; 16], 1).unwrap(), state);
    }

    #[test]
    fn step_matches_per_pixel_oracle() {
        let cfg = tiny_config(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&cfg, &mut rng, 0.7);
        let mut state = StateGrid::<f64>::zeros(4, 4, 4);
        state.data.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let mask = fire_mask(9, 0, 16, 0.5, false);
        for full in [true, false] {
            let m = if full { vec![true; 16] } else { mask.clone() };
            let got = nca_step(&w, &state, &m, 1).unwrap();
            let want = oracle_step(&w, &state, &m, 1);
            for (a, b) in got.data.iter().zip(want.data.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn step_rejects_mismatched_weights() {
        let cfg = tiny_config(1, 1);
        let w = NcaWeights::<f64>::zeros(&cfg);
        let state = StateGrid::<f64>::zeros(4, 4, 5);
        assert!(matches!(nca_step(&w, &state, &[true; 16], 1), Err(Error::Config(_))));
    }

    #[test]
    fn fire_mask_is_counter_based() {
        let a = fire_mask(42, 3, 1000, 0.5, false);
        assert_eq!(a, fire_mask(42, 3, 1000, 0.5, false));
        assert_ne!(a, fire_mask(42, 4, 1000, 0.5, false));
        assert_ne!(a, fire_mask(43, 3, 1000, 0.5, false));
        let rate = a.iter().filter(|&&f| f).count() as f64 / 1000.0;
        assert!((rate - 0.5).abs() < 0.06, "{rate}");
        assert!(fire_mask(1, 1, 10, 0.0, true).iter().all(|&f| f));
    }

    #[test]
    fn zero_steps_yield_zero_logits() {
        let cfg = tiny_config(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = TwoStageModel::<f64>::init(cfg.clone(), 0);
        model.theta = random_weights(&cfg, &mut rng, 1.0);
        model.omega = random_weights(&cfg, &mut rng, 1.0);
        let (logits, tape) = forward(&model, &random_image(8, 8, &mut rng), 0, false).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
        assert_eq!(tape.steps(), 0);
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let cfg = ModelConfig { channels: 6, hidden_units: 8, t0: 3, t1: 4, downscale_factor: 2, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = TwoStageModel::<f32>::init(cfg.clone(), 7);
        model.omega.w2.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        let img = Image::<f32>::from_gray(8, 8, &(0..64).map(|v| v as f32 / 64.0).collect::<Vec<_>>()).unwrap();
        let (a, _) = forward(&model, &img, 99, false).unwrap();
        let (b, _) = forward(&model, &img, 99, false).unwrap();
        let bits = |l: &Logits<f32>| l.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let (c, _) = forward(&model, &img, 100, false).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn deterministic_forward_matches_composed_oracle() {
        let cfg = tiny_config(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = TwoStageModel {
            theta: random_weights(&cfg, &mut rng, 0.5),
            omega: random_weights(&cfg, &mut rng, 0.5),
            config: cfg.clone(),
        };
        let img = random_image(8, 8, &mut rng);
        let (logits, tape) = forward(&model, &img, 0, true).unwrap();
        assert_eq!(tape.steps(), 7);

        // Oracle: block means, per-pixel steps, block replication.
        let mut coarse = StateGrid::<f64>::zeros(4, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let m = (img.data[[(2 * y) * 8 + 2 * x, 0]]
                    + img.data[[(2 * y) * 8 + 2 * x + 1, 0]]
                    + img.data[[(2 * y + 1) * 8 + 2 * x, 0]]
                    + img.data[[(2 * y + 1) * 8 + 2 * x + 1, 0]])
                    / 4.0;
                coarse.data[[y * 4 + x, 0]] = m;
            }
        }
        for _ in 0..3 {
            coarse = oracle_step(&model.theta, &coarse, &[true; 16], 1);
        }
        let mut fine = StateGrid::<f64>::zeros(8, 8, 4);
        for y in 0..8 {
            for x in 0..8 {
                fine.data[[y * 8 + x, 0]] = img.data[[y * 8 + x, 0]];
                for c in 1..4 {
                    fine.data[[y * 8 + x, c]] = coarse.get(c, y / 2, x / 2);
                }
            }
        }
        for _ in 0..4 {
            fine = oracle_step(&model.omega, &fine, &[true; 64], 1);
        }
        for p in 0..64 {
            for k in 0..2 {
                assert!((logits.data[[p, k]] - fine.data[[p, 1 + k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_channels_are_immutable_on_tape() {
        let cfg = ModelConfig { channels: 5, hidden_units: 6, t0: 4, t1: 5, downscale_factor: 2, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = TwoStageModel {
            theta: random_weights(&cfg, &mut rng, 1.0),
            omega: random_weights(&cfg, &mut rng, 1.0),
            config: cfg.clone(),
        };
        let img = random_image(8, 8, &mut rng);
        let coarse_img = downscale(&img, 2).unwrap();
        let (_, tape) = forward(&model, &img, 1, false).unwrap();
        for r in &tape.coarse {
            assert_eq!(r.state.data.column(0), coarse_img.data.column(0));
        }
        for r in &tape.fine {
            assert_eq!(r.state.data.column(0), img.data.column(0));
        }
    }

    fn loss_at(model: &TwoStageModel<f64>, img: &Image<f64>, target: &[u8]) -> f64 {
        let (logits, _) = forward(model, img, 0, true).unwrap();
        cross_entropy_loss(&logits, target).unwrap().0
    }

    #[test]
    fn bptt_matches_central_differences() {
        let cfg = tiny_config(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = TwoStageModel {
            theta: random_weights(&cfg, &mut rng, 0.6),
            omega: random_weights(&cfg, &mut rng, 0.6),
            config: cfg.clone(),
        };
        let img = random_image(8, 8, &mut rng);
        let target: Vec<u8> = (0..64).map(|_| rng.random_range(0..2u8)).collect();
        let (logits, tape) = forward(&model, &img, 0, true).unwrap();
        let (_, dlogits) = cross_entropy_loss(&logits, &target).unwrap();
        let grads = backward_bptt(&model, &tape, &dlogits).unwrap();
        let analytic = flatten(&TwoStageModel { theta: grads.theta, omega: grads.omega, config: cfg.clone() });

        let pattern = relu_pattern(&model, &tape);
        let base = flatten(&model);
        let h = 1e-4;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let (pm, mm) = (unflatten(&plus, &cfg).unwrap(), unflatten(&minus, &cfg).unwrap());
            for m in [&pm, &mm] {
                let (_, t) = forward(m, &img, 0, true).unwrap();
                assert_eq!(relu_pattern(m, &t), pattern, "param {i}: step crosses a ReLU kink");
            }
            let lp = loss_at(&pm, &img, &target);
            let lm = loss_at(&mm, &img, &target);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-7);
            assert!((fd - analytic[i]).abs() / denom < 1e-3, "param {i}: fd {fd} vs bptt {}", analytic[i]);
        }
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let cfg = tiny_config(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = TwoStageModel {
            theta: random_weights(&cfg, &mut rng, 0.6),
            omega: random_weights(&cfg, &mut rng, 0.6),
            config: cfg.clone(),
        };
        let (_, tape) = forward(&model, &random_image(8, 8, &mut rng), 3, false).unwrap();
        let grads = backward_bptt(&model, &tape, &Array2::zeros((64, 2))).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn unused_fine_stage_gets_no_gradient() {
        let cfg = tiny_config(2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = TwoStageModel {
            theta: random_weights(&cfg, &mut rng, 0.6),
            omega: random_weights(&cfg, &mut rng, 0.6),
            config: cfg.clone(),
        };
        let img = random_image(8, 8, &mut rng);
        let (logits, tape) = forward(&model, &img, 0, true).unwrap();
        let target = vec![1u8; 64];
        let (_, d) = cross_entropy_loss(&logits, &target).unwrap();
        let grads = backward_bptt(&model, &tape, &d).unwrap();
        assert_eq!(grads.omega.max_abs(), 0.0);
        assert!(grads.theta.max_abs() > 0.0);
    }

    #[test]
    fn mean_reduction_divides_by_stage_length() {
        let cfg = tiny_config(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = TwoStageModel {
            theta: random_weights(&cfg, &mut rng, 0.6),
            omega: random_weights(&cfg, &mut rng, 0.6),
            config: cfg.clone(),
        };
        let img = random_image(8, 8, &mut rng);
        let (logits, tape) = forward(&model, &img, 0, true).unwrap();
        let (_, d) = cross_entropy_loss(&logits, &vec![0u8; 64]).unwrap();
        let summed = backward_bptt(&model, &tape, &d).unwrap();
        let mean_model = TwoStageModel {
            config: ModelConfig { grad_reduction: GradReduction::MeanOverSteps, ..cfg.clone() },
            ..model.clone()
        };
        let mean = backward_bptt(&mean_model, &tape, &d).unwrap();
        assert!((summed.theta.w2[[1, 0]] / 2.0 - mean.theta.w2[[1, 0]]).abs() < 1e-15);
        assert!((summed.omega.b2[2] / 4.0 - mean.omega.b2[2]).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let cfg = tiny_config(2, 2);
        let model = TwoStageModel::<f64>::init(cfg.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (_, tape) = forward(&model, &random_image(8, 8, &mut rng), 0, true).unwrap();
        let other = TwoStageModel::<f64>::init(tiny_config(3, 2), 0);
        assert!(matches!(backward_bptt(&other, &tape, &Array2::zeros((64, 2))), Err(Error::Config(_))));
    }
}
