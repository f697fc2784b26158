//! Spectral Adaptive Modulation Block (SAMB).
//!
//! Pipeline: forward spectral transform -> frequency enhancement (from the
//! concatenated real/imaginary/magnitude planes) and a modulation factor
//! f_m (from the channel-standardized input) -> recalibration of the real
//! and imaginary components
//!
//! ```text
//!   R' = R * (1 + alpha * (f_m - 1)) + beta * f_e * phi
//!   I' = I * (1 + alpha * (f_m - 1))
//! ```
//!
//! -> inverse transform back to the spatial domain. `phi` is the magnitude
//! of the *input* spectrum (pre-modulation). Both enhancement and modulator
//! output heads are zero-initialized, which makes a fresh SAMB the exact
//! identity map: f_m == 1 and f_e == 0 regardless of alpha and beta, so
//! alpha and beta can start at 0.5 without breaking neutrality while keeping
//! every internal path trainable from the first steps.

use crate::error::{Error, Result};
use crate::fft::half_width;
use crate::nn::{Conv3d, Init, Linear, ParamStore};
use crate::tape::{Tape, Var};

/// Half-spectrum of a feature volume on the tape: stacked (R, I) plus the
/// original spatial width needed for inversion.
#[derive(Clone, Copy)]
pub struct SpectralTensor {
    /// `[2, b, c, d, h, wh]`, real part at index 0, imaginary at index 1.
    pub stacked: Var,
    pub re: Var,
    pub im: Var,
    /// Spatial width of the originating volume.
    pub width: usize,
}

impl SpectralTensor {
    /// Magnitude `phi = sqrt(R^2 + I^2)` (non-negative by construction,
    /// exactly zero wherever R = I = 0).
    pub fn magnitude(&self, t: &mut Tape) -> Var {
        t.hypot(self.re, self.im)
    }
}

/// Forward spectral transform of a real feature volume `[b, c, d, h, w]`.
/// The DC bin holds the per-channel spatial sum.
pub fn forward_spectral(t: &mut Tape, x: Var) -> Result<SpectralTensor> {
    let shape = t.shape(x);
    if shape.len() != 5 {
        return Err(Error::Contract(format!(
            "forward_spectral expects [b, c, d, h, w], got {shape:?}"
        )));
    }
    // Axes of extent 1 transform trivially (identity); only empty axes are
    // rejected. Deep backbone stages legitimately collapse depth to 1.
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Contract(format!(
            "forward_spectral requires non-empty axes, got {shape:?}"
        )));
    }
    if !t.value(x).all_finite() {
        return Err(Error::Contract("forward_spectral input contains non-finite values".into()));
    }
    let width = shape[4];
    let stacked = t.rfft3(x);
    let re = t.index0(stacked, 0);
    let im = t.index0(stacked, 1);
    Ok(SpectralTensor { stacked, re, im, width })
}

/// Inverse spectral transform back to a real volume with the given spatial
/// shape.
pub fn inverse_spectral(t: &mut Tape, s: &SpectralTensor, spatial: [usize; 3]) -> Result<Var> {
    let sh = t.shape(s.stacked).to_vec();
    if sh[3] != spatial[0] || sh[4] != spatial[1] || half_width(spatial[2]) != sh[5] {
        return Err(Error::Contract(format!(
            "spectral shape {sh:?} inconsistent with spatial shape {spatial:?}"
        )));
    }
    if s.width != spatial[2] {
        return Err(Error::Contract(format!(
            "spectral tensor originated from width {}, requested {}",
            s.width, spatial[2]
        )));
    }
    Ok(t.irfft3(s.stacked, spatial[2]))
}

/// Apply the modulation equations to a spectrum given the per-channel
/// modulation factor `f_m` `[b, c]`, enhancement field `f_e` (same shape as
/// R), and scalar coefficient nodes alpha and beta. `phi` is recomputed from
/// the modulated spectrum by the returned tensor's `magnitude`.
pub fn modulate_with(
    t: &mut Tape,
    s: &SpectralTensor,
    f_m: Var,
    f_e: Var,
    alpha: Var,
    beta: Var,
) -> Result<SpectralTensor> {
    let rs = t.shape(s.re).to_vec();
    if t.shape(f_e) != rs.as_slice() {
        return Err(Error::Contract(format!(
            "enhancement field shape {:?} does not match spectrum {:?}",
            t.shape(f_e),
            rs
        )));
    }
    if t.shape(f_m) != [rs[0], rs[1]] {
        return Err(Error::Contract(format!(
            "modulation factor shape {:?} must be [b, c] = [{}, {}]",
            t.shape(f_m),
            rs[0],
            rs[1]
        )));
    }
    let phi = s.magnitude(t);
    let fm_m1 = t.add_const(f_m, -1.0);
    let scaled = t.scale_scalar(fm_m1, alpha);
    let gain = t.add_const(scaled, 1.0);
    let re_scaled = t.mul_channel(s.re, gain);
    let im_mod = t.mul_channel(s.im, gain);
    let fe_phi = t.mul(f_e, phi);
    let fe_term = t.scale_scalar(fe_phi, beta);
    let re_mod = t.add(re_scaled, fe_term);
    let stacked = t.stack0(re_mod, im_mod);
    Ok(SpectralTensor { stacked, re: re_mod, im: im_mod, width: s.width })
}

/// SAMB parameters: enhancement head, modulator head, and the two scaling
/// coefficients.
pub struct Samb {
    pub channels: usize,
    enh1: Conv3d,
    enh2: Conv3d,
    mod1: Linear,
    mod2: Linear,
    pub alpha: usize,
    pub beta: usize,
}

/// Offset added to the modulator softplus so zero-initialized weights give
/// f_m == 1 exactly.
pub const MODULATOR_OFFSET: f64 = 1.0 - std::f64::consts::LN_2;

impl Samb {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let enh1 = Conv3d::same(
            store,
            &format!("{name}.enh1"),
            3 * channels,
            channels,
            1,
            1,
            Init::TruncNormal(0.02),
        );
        let enh2 = Conv3d::same(store, &format!("{name}.enh2"), channels, channels, 1, 1, Init::Zero);
        let mod1 = Linear::new(store, &format!("{name}.mod1"), channels, channels, Init::TruncNormal(0.02), true);
        let mod2 = Linear::new(store, &format!("{name}.mod2"), channels, channels, Init::Zero, true);
        let alpha = store.add(&format!("{name}.alpha"), &[1], Init::Const(0.5), false);
        let beta = store.add(&format!("{name}.beta"), &[1], Init::Const(0.5), false);
        Samb { channels, enh1, enh2, mod1, mod2, alpha, beta }
    }

    /// Frequency enhancement field f_e from the concatenated (R, I, phi)
    /// planes; same shape as R. Final layer is zero-initialized so f_e == 0
    /// at init.
    pub fn enhance(&self, t: &mut Tape, store: &ParamStore, s: &SpectralTensor) -> Var {
        let phi = s.magnitude(t);
        let cat = t.concat_ax1(&[s.re, s.im, phi]);
        let h = self.enh1.forward(t, store, cat);
        let h = t.gelu(h);
        self.enh2.forward(t, store, h)
    }

    /// Modulation factor f_m `[b, c]` from the normalized input volume.
    /// The pooled statistic is the spatial mean of |x_norm| per channel
    /// (the mean itself is identically zero after standardization), mapped
    /// through a two-layer head and `softplus(z) + (1 - ln 2)`, strictly
    /// positive and equal to 1 at zero-initialized weights.
    pub fn modulator(&self, t: &mut Tape, store: &ParamStore, x_norm: Var) -> Var {
        let mag = t.abs(x_norm);
        let stat = t.gap(mag);
        let h = self.mod1.forward(t, store, stat);
        let h = t.gelu(h);
        let z = self.mod2.forward(t, store, h);
        let sp = t.softplus(z);
        t.add_const(sp, MODULATOR_OFFSET)
    }

    /// Modulate a spectrum with this block's learned heads and coefficients.
    pub fn modulate(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        s: &SpectralTensor,
        f_m: Var,
        f_e: Var,
    ) -> Result<SpectralTensor> {
        let alpha = t.bind_param(self.alpha, store.value(self.alpha));
        let beta = t.bind_param(self.beta, store.value(self.beta));
        modulate_with(t, s, f_m, f_e, alpha, beta)
    }

    /// Full SAMB pass: spectrum -> enhance/modulate -> inverse. Output has
    /// the input's shape.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = t.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.channels {
            return Err(Error::Contract(format!(
                "samb built for {} channels, input {shape:?}",
                self.channels
            )));
        }
        let spatial = [shape[2], shape[3], shape[4]];
        let s = forward_spectral(t, x)?;
        let f_e = self.enhance(t, store, &s);
        let x_norm = t.channel_std(x, 1e-6);
        let f_m = self.modulator(t, store, x_norm);
        let modulated = self.modulate(t, store, &s, f_m, f_e)?;
        inverse_spectral(t, &modulated, spatial)
    }

    /// Forward MACs at the given input shape. Each 1D length-n transform is
    /// counted as `5 n log2(n)` real MACs; elementwise modulation as one MAC
    /// per spectral element.
    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        let [b, c, d, h, w] = *in_shape;
        let wh = half_width(w);
        let fft_lines = |n: usize, lines: u64| -> u64 {
            if n < 2 {
                return 0;
            }
            (5.0 * n as f64 * (n as f64).log2()).round() as u64 * lines
        };
        let bc = (b * c) as u64;
        let one_transform = fft_lines(w, bc * (d * h) as u64)
            + fft_lines(h, bc * (d * w) as u64)
            + fft_lines(d, bc * (h * w) as u64);
        let spec_shape = [b, 3 * c, d, h, wh];
        let enh = self.enh1.macs(&spec_shape) + self.enh2.macs(&[b, c, d, h, wh]);
        let modu = (self.mod1.macs(b) + self.mod2.macs(b)) as u64;
        let elementwise = (b * c * d * h * wh) as u64 * 4;
        2 * one_transform + enh + modu + elementwise
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Array;

    fn max_rel_diff(a: &Array, b: &Array) -> f64 {
        let scale = a.data().iter().map(|v| v.abs()).fold(1e-12, f64::max);
        a.max_abs_diff(b) / scale
    }

    #[test]
    fn constant_volume_concentrates_in_dc() {
        let mut t = Tape::new();
        let x = t.leaf(Array::filled(&[1, 1, 4, 4, 4], 2.5));
        let s = forward_spectral(&mut t, x).unwrap();
        let re = t.value(s.re);
        assert!((re.at(&[0, 0, 0, 0, 0]) - 160.0).abs() < 1e-9, "dc = 64 * 2.5");
        let rest: f64 = re.data()[1..].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(rest < 1e-9);
        let im_max: f64 = t.value(s.im).data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(im_max < 1e-9);
    }

    #[test]
    fn impulse_at_origin_has_flat_spectrum() {
        let mut arr = Array::zeros(&[1, 1, 4, 4, 4]);
        arr.data_mut()[0] = 1.0;
        let mut t = Tape::new();
        let x = t.leaf(arr);
        let s = forward_spectral(&mut t, x).unwrap();
        for &v in t.value(s.re).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for &v in t.value(s.im).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut arr = Array::zeros(&[1, 1, 2, 2, 2]);
        arr.data_mut()[3] = f64::NAN;
        let mut t = Tape::new();
        let x = t.leaf(arr);
        assert!(forward_spectral(&mut t, x).is_err());
    }

    #[test]
    fn magnitude_is_nonnegative_and_zero_on_zero() {
        let mut rng = Rng::new(2);
        let mut t = Tape::new();
        let x = t.leaf(Array::randn(&[1, 2, 4, 4, 6], 1.0, &mut rng));
        let s = forward_spectral(&mut t, x).unwrap();
        let phi = s.magnitude(&mut t);
        for &v in t.value(phi).data() {
            assert!(v >= 0.0);
        }
        let mut t2 = Tape::new();
        let z = t2.leaf(Array::zeros(&[1, 1, 2, 2, 2]));
        let s2 = forward_spectral(&mut t2, z).unwrap();
        let phi2 = s2.magnitude(&mut t2);
        assert!(t2.value(phi2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_scalings_are_identity() {
        let mut rng = Rng::new(3);
        let mut t = Tape::new();
        let x = t.leaf(Array::randn(&[1, 2, 4, 6, 5], 1.0, &mut rng));
        let s = forward_spectral(&mut t, x).unwrap();
        let f_m = t.leaf(Array::filled(&[1, 2], 3.7));
        let f_e = t.leaf(Array::filled(t.shape(s.re), 0.9));
        let alpha = t.leaf(Array::scalar(0.0));
        let beta = t.leaf(Array::scalar(0.0));
        let m = modulate_with(&mut t, &s, f_m, f_e, alpha, beta).unwrap();
        assert_eq!(t.value(m.re), t.value(s.re));
        assert_eq!(t.value(m.im), t.value(s.im));
    }

    #[test]
    fn unit_modulation_factor_is_identity_for_any_alpha() {
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let x = t.leaf(Array::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng));
        let s = forward_spectral(&mut t, x).unwrap();
        let f_m = t.leaf(Array::filled(&[1, 2], 1.0));
        let f_e = t.leaf(Array::zeros(t.shape(s.re)));
        let alpha = t.leaf(Array::scalar(1.9));
        let beta = t.leaf(Array::scalar(0.0));
        let m = modulate_with(&mut t, &s, f_m, f_e, alpha, beta).unwrap();
        assert!(max_rel_diff(t.value(m.re), t.value(s.re)) < 1e-12);
        assert!(max_rel_diff(t.value(m.im), t.value(s.im)) < 1e-12);
    }

    /// Single-bin hand evaluation:
    /// R=2, I=1, f_m=3, f_e=0.5, alpha=1, beta=2
    /// => R' = 2*3 + 2*0.5*sqrt(5) = 6 + sqrt(5), I' = 3.
    #[test]
    fn hand_evaluated_modulation_bin() {
        let mut t = Tape::new();
        let re = t.leaf(Array::from_vec(&[1, 1, 1, 1, 1], vec![2.0]));
        let im = t.leaf(Array::from_vec(&[1, 1, 1, 1, 1], vec![1.0]));
        let stacked = t.stack0(re, im);
        let s = SpectralTensor { stacked, re, im, width: 1 };
        let f_m = t.leaf(Array::from_vec(&[1, 1], vec![3.0]));
        let f_e = t.leaf(Array::from_vec(&[1, 1, 1, 1, 1], vec![0.5]));
        let alpha = t.leaf(Array::scalar(1.0));
        let beta = t.leaf(Array::scalar(2.0));
        let m = modulate_with(&mut t, &s, f_m, f_e, alpha, beta).unwrap();
        let want_r = 6.0 + 5.0_f64.sqrt();
        assert!((t.value(m.re).data()[0] - want_r).abs() < 1e-12);
        assert!((t.value(m.im).data()[0] - 3.0).abs() < 1e-12);
    }

    /// R'(beta) must be affine in beta with everything else held fixed.
    #[test]
    fn modulated_real_part_is_affine_in_beta() {
        let mut rng = Rng::new(5);
        let x = Array::randn(&[1, 2, 3, 4, 4], 1.0, &mut rng);
        let f_m_arr = Array::from_vec(&[1, 2], vec![1.3, 0.4]);
        let at_beta = |b: f64| -> Array {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let s = forward_spectral(&mut t, xv).unwrap();
            let f_e = t.leaf(Array::filled(t.shape(s.re), 0.25));
            let f_m = t.leaf(f_m_arr.clone());
            let alpha = t.leaf(Array::scalar(0.8));
            let beta = t.leaf(Array::scalar(b));
            let m = modulate_with(&mut t, &s, f_m, f_e, alpha, beta).unwrap();
            t.value(m.re).clone()
        };
        let r0 = at_beta(0.0);
        let r1 = at_beta(1.0);
        let r2 = at_beta(2.0);
        // Exact affinity: r2 - r1 == r1 - r0 elementwise.
        for i in 0..r0.len() {
            let lhs = r2.data()[i] - r1.data()[i];
            let rhs = r1.data()[i] - r0.data()[i];
            assert!(
                (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1e-9),
                "not affine at {i}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn enhance_matches_shape_and_zero_propagation() {
        let mut store = ParamStore::new(7);
        let samb = Samb::new(&mut store, "samb", 8);
        let mut rng = Rng::new(8);
        let mut t = Tape::new();
        let x = t.leaf(Array::randn(&[2, 8, 4, 4, 3], 1.0, &mut rng));
        let s = forward_spectral(&mut t, x).unwrap();
        let f_e = samb.enhance(&mut t, &store, &s);
        assert_eq!(t.shape(f_e), t.shape(s.re));
        // Zero spectrum with the (default) zero-initialized final layer.
        let mut t2 = Tape::new();
        let re = t2.leaf(Array::zeros(&[1, 8, 2, 2, 2]));
        let im = t2.leaf(Array::zeros(&[1, 8, 2, 2, 2]));
        let stacked = t2.stack0(re, im);
        let s2 = SpectralTensor { stacked, re, im, width: 2 };
        let f_e2 = samb.enhance(&mut t2, &store, &s2);
        assert!(t2.value(f_e2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulator_is_neutral_at_init_and_strictly_positive() {
        let mut store = ParamStore::new(9);
        let samb = Samb::new(&mut store, "samb", 4);
        let mut rng = Rng::new(10);
        // Neutral at init: zero-initialized output head forces f_m == 1.
        let mut t = Tape::new();
        let x = t.leaf(Array::randn(&[2, 4, 3, 4, 4], 1.0, &mut rng));
        let xn = t.channel_std(x, 1e-6);
        let f_m = samb.modulator(&mut t, &store, xn);
        assert_eq!(t.shape(f_m), [2, 4]);
        for &v in t.value(f_m).data() {
            assert!((v - 1.0).abs() < 1e-12, "f_m at init = {v}");
        }
        // Positivity sweep with randomized head weights.
        let m2 = store.slot("samb.mod2.w").unwrap();
        *store.value_mut(m2) = Array::randn(&[4, 4], 0.8, &mut rng);
        let b2 = store.slot("samb.mod2.b").unwrap();
        *store.value_mut(b2) = Array::randn(&[4], 0.8, &mut rng);
        for trial in 0..1000 {
            let mut t = Tape::new();
            let x = t.leaf(Array::randn(&[1, 4, 2, 3, 3], 2.0, &mut rng));
            let xn = t.channel_std(x, 1e-6);
            let f_m = samb.modulator(&mut t, &store, xn);
            for &v in t.value(f_m).data() {
                assert!(v > 0.0, "trial {trial}: f_m = {v}");
            }
        }
    }

    #[test]
    fn fresh_samb_is_identity() {
        let mut store = ParamStore::new(11);
        let samb = Samb::new(&mut store, "samb", 6);
        let mut rng = Rng::new(12);
        let x = Array::randn(&[2, 6, 4, 6, 5], 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = samb.forward(&mut t, &store, xv).unwrap();
        assert_eq!(t.shape(y), x.shape());
        assert!(max_rel_diff(t.value(y), &x) < 1e-10, "fresh samb must be identity");
    }

    #[test]
    fn round_trip_through_identity_modulation_recovers_input() {
        let mut store = ParamStore::new(13);
        let samb = Samb::new(&mut store, "samb", 2);
        // Zero the coefficients: modulate is then the identity regardless of
        // the heads.
        let a = store.slot("samb.alpha").unwrap();
        let b = store.slot("samb.beta").unwrap();
        *store.value_mut(a) = Array::scalar(0.0);
        *store.value_mut(b) = Array::scalar(0.0);
        let m2 = store.slot("samb.mod2.w").unwrap();
        let mut rng = Rng::new(14);
        *store.value_mut(m2) = Array::randn(&[2, 2], 0.5, &mut rng);
        let e2 = store.slot("samb.enh2.w").unwrap();
        *store.value_mut(e2) = Array::randn(&[2, 2, 1, 1, 1], 0.5, &mut rng);
        let x = Array::randn(&[1, 2, 8, 8, 8], 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = samb.forward(&mut t, &store, xv).unwrap();
        assert!(max_rel_diff(t.value(y), &x) < 1e-10);
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut store = ParamStore::new(15);
        let samb = Samb::new(&mut store, "samb", 16);
        let mut rng = Rng::new(16);
        let x = Array::randn(&[2, 16, 8, 12, 10], 0.7, &mut rng);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = samb.forward(&mut t, &store, xv).unwrap();
        assert_eq!(t.shape(y), x.shape());
    }

    /// From the neutral init, the zero-initialized heads receive gradient
    /// immediately (alpha and beta start at 0.5), and after two optimizer
    /// steps every SAMB parameter does: no path is structurally dead.
    #[test]
    fn all_parameters_receive_gradient_within_two_steps() {
        use crate::nn::{param_grads, AdamW};
        let mut store = ParamStore::new(21);
        let samb = Samb::new(&mut store, "samb", 4);
        let mut opt = AdamW::new(&store, 0.0);
        let mut rng = Rng::new(22);
        let x = Array::randn(&[2, 4, 4, 6, 6], 1.0, &mut rng);
        let weights = Array::from_vec(
            &[2, 4, 4, 6, 6],
            (0..2 * 4 * 4 * 6 * 6).map(|i| ((i % 11) as f64 - 5.0) / 3.0).collect(),
        );
        let mut grads_by_step: Vec<std::collections::BTreeMap<usize, f64>> = Vec::new();
        for _ in 0..2 {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = samb.forward(&mut t, &store, xv).unwrap();
            let wv = t.leaf(weights.clone());
            let prod = t.mul(y, wv);
            let loss = t.sum_all(prod);
            let grads = t.backward(loss);
            let pg = param_grads(&t, &grads);
            grads_by_step.push(
                pg.iter()
                    .map(|(slot, g)| (*slot, g.data().iter().map(|v| v.abs()).fold(0.0, f64::max)))
                    .collect(),
            );
            opt.step(&mut store, &pg, 1e-2);
        }
        // Step 1: the zero-initialized output heads already train.
        for name in ["samb.enh2.w", "samb.mod2.w"] {
            let slot = store.slot(name).unwrap();
            assert!(grads_by_step[0][&slot] > 0.0, "{name} dead at init");
        }
        // Step 2: every parameter, including alpha, beta and the first
        // layers behind the heads, sees nonzero gradient.
        for p in store.params() {
            let slot = store.slot(&p.name).unwrap();
            let g = grads_by_step[1].get(&slot).copied().unwrap_or(0.0);
            assert!(g > 0.0, "parameter {} has zero gradient after escape", p.name);
        }
    }

    #[test]
    fn fixed_seed_runs_are_bitwise_identical() {
        let run = || -> Array {
            let mut store = ParamStore::new(77);
            let samb = Samb::new(&mut store, "samb", 4);
            let mut rng = Rng::new(78);
            let mut t = Tape::new();
            let x = t.leaf(Array::randn(&[2, 4, 4, 6, 6], 1.0, &mut rng));
            let s = forward_spectral(&mut t, x).unwrap();
            let f_e = samb.enhance(&mut t, &store, &s);
            t.value(f_e).clone()
        };
        assert_eq!(run(), run());
    }
}
