//! Tiny two-layer perceptrons and the color/visibility decoder built on them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encode_backward, encode_into, encoded_len};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `in -> hidden -> out` with a rectified-linear hidden layer and a linear
/// output.
///
/// Parameter layout: `W1` (hidden x in, row-major), `b1`, `W2` (out x hidden),
/// `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn param_count(n_in: usize, hidden: usize, n_out: usize) -> usize {
        hidden * n_in + hidden + n_out * hidden + n_out
    }

    pub fn zeros(n_in: usize, hidden: usize, n_out: usize) -> Self {
        Self {
            n_in,
            hidden,
            n_out,
            params: vec![0.0; Self::param_count(n_in, hidden, n_out)],
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(n_in: usize, hidden: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(n_in, hidden, n_out);
        let a1 = 1.0 / (n_in.max(1) as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let (w1, rest) = m.params.split_at_mut(hidden * n_in);
        for w in w1 {
            *w = rng.gen_range(-a1..a1);
        }
        let w2 = &mut rest[hidden..hidden + n_out * hidden];
        for w in w2 {
            *w = rng.gen_range(-a2..a2);
        }
        m
    }

    /// Zeroes the output layer so the network starts as the zero map.
    pub fn zero_output_layer(&mut self) {
        let start = self.hidden * self.n_in + self.hidden;
        for w in &mut self.params[start..] {
            *w = 0.0;
        }
    }

    #[inline]
    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.n_in;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.n_out * self.hidden;
        (b1, w2, b2)
    }

    /// Forward pass. `cache` receives the input followed by the hidden
    /// activations, as needed by [`Mlp::backward`].
    pub fn forward(&self, x: &[f64], cache: &mut Vec<f64>, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        cache.clear();
        cache.extend_from_slice(x);
        for j in 0..self.hidden {
            let row = &p[j * self.n_in..(j + 1) * self.n_in];
            let mut s = p[b1 + j];
            for (w, xi) in row.iter().zip(x) {
                s += w * xi;
            }
            cache.push(s.max(0.0));
        }
        let a = &cache[self.n_in..];
        for (o, out_o) in out.iter_mut().enumerate().take(self.n_out) {
            let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
            let mut s = p[b2 + o];
            for (w, ai) in row.iter().zip(a) {
                s += w * ai;
            }
            *out_o = s;
        }
    }

    /// Accumulates parameter gradients into `dparams` and, when requested, the
    /// input gradient into `dx`.
    pub fn backward(&self, cache: &[f64], dy: &[f64], dparams: &mut [f64], dx: Option<&mut [f64]>) {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let x = &cache[..self.n_in];
        let a = &cache[self.n_in..self.n_in + self.hidden];
        let mut da = vec![0.0; self.hidden];
        for o in 0..self.n_out {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            dparams[b2 + o] += g;
            let base = w2 + o * self.hidden;
            for j in 0..self.hidden {
                dparams[base + j] += g * a[j];
                da[j] += g * p[base + j];
            }
        }
        let mut dx = dx;
        for j in 0..self.hidden {
            if a[j] <= 0.0 || da[j] == 0.0 {
                continue;
            }
            let g = da[j];
            dparams[b1 + j] += g;
            let base = j * self.n_in;
            for i in 0..self.n_in {
                dparams[base + i] += g * x[i];
            }
            if let Some(dx) = dx.as_deref_mut() {
                for i in 0..self.n_in {
                    dx[i] += g * p[base + i];
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub view_dependent: bool,
    /// Highest view-direction frequency; 0 feeds the raw direction.
    pub view_degrees: usize,
    /// Extra position encoding `(d1, d2)` routed straight to the color head.
    pub residual_pe: Option<(usize, usize)>,
    pub time_conditioned: bool,
    pub time_degrees: usize,
    pub visibility_head: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            hidden: 64,
            view_dependent: true,
            view_degrees: 4,
            residual_pe: None,
            time_conditioned: false,
            time_degrees: 4,
            visibility_head: false,
        }
    }
}

impl DecoderConfig {
    fn view_len(&self) -> usize {
        encoded_len(3, 0, self.view_degrees)
    }

    pub fn color_input_len(&self) -> usize {
        let mut n = self.feature_dim;
        if let Some((d1, d2)) = self.residual_pe {
            n += encoded_len(3, d1, d2);
        }
        if self.view_dependent {
            n += self.view_len();
        }
        if self.time_conditioned {
            n += encoded_len(1, 0, self.time_degrees);
        }
        n
    }

    pub fn visibility_input_len(&self) -> usize {
        self.feature_dim + self.view_len()
    }
}

/// Inputs shared by the decoder heads for one sample.
#[derive(Debug, Clone, Copy)]
pub struct DecoderInput<'a> {
    pub feature: &'a [f64],
    /// Position normalized to `[-1, 1]` over the field box.
    pub position: [f64; 3],
    pub view: [f64; 3],
    /// Time normalized to `[0, 1]`.
    pub time: f64,
}

/// Color head `rgb = sigmoid(N2(h, ...))` with an optional visibility head
/// `T = sigmoid(Nv(h, view))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub color: Mlp,
    pub visibility: Option<Mlp>,
}

impl Decoder {
    pub fn new(config: DecoderConfig, rng: &mut impl Rng) -> Self {
        let color = Mlp::init(config.color_input_len(), config.hidden, 3, rng);
        let visibility = config
            .visibility_head
            .then(|| Mlp::init(config.visibility_input_len(), config.hidden, 1, rng));
        Self {
            config,
            color,
            visibility,
        }
    }

    fn color_input(&self, inp: &DecoderInput, x: &mut Vec<f64>) {
        let c = &self.config;
        x.clear();
        x.extend_from_slice(inp.feature);
        if let Some((d1, d2)) = c.residual_pe {
            encode_into(&inp.position, d1, d2, x);
        }
        if c.view_dependent {
            encode_into(&inp.view, 0, c.view_degrees, x);
        }
        if c.time_conditioned {
            encode_into(&[inp.time], 0, c.time_degrees, x);
        }
    }

    pub fn query_color(&self, inp: &DecoderInput, cache: &mut Vec<f64>) -> [f64; 3] {
        let mut x = Vec::with_capacity(self.color.n_in);
        self.color_input(inp, &mut x);
        let mut out = [0.0; 3];
        self.color.forward(&x, cache, &mut out);
        out.map(sigmoid)
    }

    /// Backward through [`Decoder::query_color`]. Adds to `dparams`, `dh` and
    /// `dpos` (gradient w.r.t. the normalized position).
    pub fn color_backward(
        &self,
        inp: &DecoderInput,
        cache: &[f64],
        rgb: &[f64; 3],
        d_rgb: &[f64; 3],
        dparams: &mut [f64],
        dh: &mut [f64],
        dpos: &mut [f64; 3],
    ) {
        let dy: Vec<f64> = (0..3).map(|i| d_rgb[i] * rgb[i] * (1.0 - rgb[i])).collect();
        let mut dx = vec![0.0; self.color.n_in];
        self.color.backward(cache, &dy, dparams, Some(&mut dx));
        let fd = self.config.feature_dim;
        for i in 0..fd {
            dh[i] += dx[i];
        }
        if let Some((d1, d2)) = self.config.residual_pe {
            let n = encoded_len(3, d1, d2);
            encode_backward(&inp.position, d1, d2, &dx[fd..fd + n], dpos);
        }
    }

    /// Predicted transmittance for the sample seen along `view`.
    pub fn query_visibility(&self, feature: &[f64], view: &[f64; 3], cache: &mut Vec<f64>) -> Option<f64> {
        let head = self.visibility.as_ref()?;
        let mut x = Vec::with_capacity(head.n_in);
        x.extend_from_slice(feature);
        encode_into(view, 0, self.config.view_degrees, &mut x);
        let mut out = [0.0];
        head.forward(&x, cache, &mut out);
        Some(sigmoid(out[0]))
    }

    pub fn visibility_backward(&self, cache: &[f64], t_hat: f64, d_t: f64, dparams: &mut [f64], dh: &mut [f64]) {
        let Some(head) = self.visibility.as_ref() else {
            return;
        };
        let dy = [d_t * t_hat * (1.0 - t_hat)];
        let mut dx = vec![0.0; head.n_in];
        head.backward(cache, &dy, dparams, Some(&mut dx));
        for i in 0..self.config.feature_dim {
            dh[i] += dx[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_network_outputs_half_gray() {
        let mut d = Decoder::new(DecoderConfig::default(), &mut rng());
        d.color.params.iter_mut().for_each(|p| *p = 0.0);
        let h = vec![0.3; 8];
        let inp = DecoderInput {
            feature: &h,
            position: [0.0; 3],
            view: [0.0, 0.0, 1.0],
            time: 0.0,
        };
        assert_eq!(d.query_color(&inp, &mut Vec::new()), [0.5; 3]);
    }

    #[test]
    fn lambertian_ignores_view() {
        let cfg = DecoderConfig {
            view_dependent: false,
            ..Default::default()
        };
        let d = Decoder::new(cfg, &mut rng());
        let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let v = [0.6, 0.0, 0.8];
        let a = DecoderInput { feature: &h, position: [0.1, 0.2, 0.3], view: v, time: 0.0 };
        let b = DecoderInput { view: v.map(|x| -x), ..a };
        assert_eq!(d.query_color(&a, &mut Vec::new()), d.query_color(&b, &mut Vec::new()));
    }

    #[test]
    fn view_dependent_uses_view() {
        let d = Decoder::new(DecoderConfig::default(), &mut rng());
        let h = vec![0.2; 8];
        let a = DecoderInput { feature: &h, position: [0.0; 3], view: [0.6, 0.0, 0.8], time: 0.0 };
        let b = DecoderInput { view: [-0.6, 0.0, -0.8], ..a };
        assert_ne!(d.query_color(&a, &mut Vec::new()), d.query_color(&b, &mut Vec::new()));
    }

    /// Scalar functional `sum_i k_i rgb_i + k_3 T` for gradient checks.
    fn functional(d: &Decoder, inp: &DecoderInput) -> f64 {
        let rgb = d.query_color(inp, &mut Vec::new());
        let t = d.query_visibility(inp.feature, &inp.view, &mut Vec::new()).unwrap();
        0.7 * rgb[0] - 1.3 * rgb[1] + 0.4 * rgb[2] + 0.9 * t
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = DecoderConfig {
            residual_pe: Some((1, 3)),
            time_conditioned: true,
            visibility_head: true,
            ..Default::default()
        };
        let d = Decoder::new(cfg, &mut rng());
        let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let inp = DecoderInput { feature: &h, position: [0.2, -0.4, 0.7], view: [0.0, 0.6, 0.8], time: 0.3 };
        let mut cc = Vec::new();
        let rgb = d.query_color(&inp, &mut cc);
        let mut vc = Vec::new();
        let t = d.query_visibility(&h, &inp.view, &mut vc).unwrap();
        let mut gc = vec![0.0; d.color.params.len()];
        let mut gv = vec![0.0; d.visibility.as_ref().unwrap().params.len()];
        let mut dh = vec![0.0; 8];
        let mut dpos = [0.0; 3];
        d.color_backward(&inp, &cc, &rgb, &[0.7, -1.3, 0.4], &mut gc, &mut dh, &mut dpos);
        d.visibility_backward(&vc, t, 0.9, &mut gv, &mut dh);

        let eps = 1e-5;
        let check = |fd: f64, an: f64, what: &str| {
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-4, "{what}: fd {fd} analytic {an}");
        };
        for i in (0..gc.len()).step_by(7) {
            let mut dp = d.clone();
            dp.color.params[i] += eps;
            let mut dm = d.clone();
            dm.color.params[i] -= eps;
            check((functional(&dp, &inp) - functional(&dm, &inp)) / (2.0 * eps), gc[i], "color param");
        }
        for i in (0..gv.len()).step_by(5) {
            let mut dp = d.clone();
            dp.visibility.as_mut().unwrap().params[i] += eps;
            let mut dm = d.clone();
            dm.visibility.as_mut().unwrap().params[i] -= eps;
            check((functional(&dp, &inp) - functional(&dm, &inp)) / (2.0 * eps), gv[i], "vis param");
        }
        for i in 0..8 {
            let mut hp = h.clone();
            hp[i] += eps;
            let mut hm = h.clone();
            hm[i] -= eps;
            let fp = functional(&d, &DecoderInput { feature: &hp, ..inp });
            let fm = functional(&d, &DecoderInput { feature: &hm, ..inp });
            check((fp - fm) / (2.0 * eps), dh[i], "feature");
        }
        for i in 0..3 {
            let mut pp = inp.position;
            pp[i] += eps;
            let mut pm = inp.position;
            pm[i] -= eps;
            let fp = functional(&d, &DecoderInput { position: pp, ..inp });
            let fm = functional(&d, &DecoderInput { position: pm, ..inp });
            check((fp - fm) / (2.0 * eps), dpos[i], "position");
        }
    }
}
