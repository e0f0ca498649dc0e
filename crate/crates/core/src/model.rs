//! Multi-SSM layers and the encoder → layers → closed-loop decoder → readout
//! forecasting network.
//!
//! Layer outputs follow the filter convention: channel `i` at time `k` is
//! `C_i x_{k+1} + D_i u_k`. The decoder emits `C x_{k+1}` (the prediction for
//! step `k + 1`) in open loop and `C (A+BK)^j x_ℓ` when rolled forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::companion::{dot, normalize_stability, unit_vector, CompanionMatrix, Ssm};
use crate::constructions::{diff_c_vector, ma_residual_c};
use crate::data::Channels;
use crate::error::{check_finite, check_len, Result, SsmError};
use crate::exec::{map_indexed, Execution};
use crate::filter::{apply_filter, closed_loop_rollout, fast_closed_loop_rollout, last_state, scan, FilterCache};

pub const NETWORK_SCHEMA: &str = "companion-ssm/network@1";

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Position-wise `GELU(x W1 + b1) W2 + b2`, with `W1: s×f` and `W2: f×s`
/// stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl Ffn {
    pub fn width(&self) -> usize {
        self.b1.len()
    }

    pub fn validate(&self, s: usize) -> Result<()> {
        let f = self.b1.len();
        if f == 0 {
            return Err(SsmError::invalid("ffn", "inner width must be at least 1"));
        }
        check_len("FFN W1 rows", s, self.w1.len())?;
        check_len("FFN W2 rows", f, self.w2.len())?;
        check_len("FFN b2", s, self.b2.len())?;
        for row in &self.w1 {
            check_len("FFN W1 cols", f, row.len())?;
            check_finite("FFN W1", row)?;
        }
        for row in &self.w2 {
            check_len("FFN W2 cols", s, row.len())?;
            check_finite("FFN W2", row)?;
        }
        check_finite("FFN b1", &self.b1)?;
        check_finite("FFN b2", &self.b2)
    }

    pub fn apply_position(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.width())
            .map(|k| gelu(self.b1[k] + x.iter().zip(&self.w1).map(|(xi, row)| xi * row[k]).sum::<f64>()))
            .collect();
        (0..self.b2.len())
            .map(|j| self.b2[j] + hidden.iter().zip(&self.w2).map(|(hk, row)| hk * row[j]).sum::<f64>())
            .collect()
    }

    pub fn apply(&self, u: &Channels) -> Channels {
        let s = u.len();
        let len = u.first().map_or(0, Vec::len);
        let mut out = vec![vec![0.0; len]; s];
        let mut column = vec![0.0; s];
        for t in 0..len {
            for (c, row) in column.iter_mut().zip(u) {
                *c = row[t];
            }
            for (j, v) in self.apply_position(&column).into_iter().enumerate() {
                out[j][t] = v;
            }
        }
        out
    }
}

/// `s` single-input SSMs applied channel-wise, each with a skip weight, and
/// an optional position-wise FFN.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiSsmLayer {
    pub ssms: Vec<Ssm>,
    pub skip: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn: Option<Ffn>,
    #[serde(default)]
    pub frozen: bool,
    #[serde(skip)]
    cache: FilterCache,
}

impl PartialEq for MultiSsmLayer {
    fn eq(&self, other: &Self) -> bool {
        self.ssms == other.ssms && self.skip == other.skip && self.ffn == other.ffn && self.frozen == other.frozen
    }
}

impl MultiSsmLayer {
    /// The layer's `skip` is the only direct term; member SSMs must have `D = 0`.
    pub fn new(ssms: Vec<Ssm>, skip: Vec<f64>, ffn: Option<Ffn>, frozen: bool) -> Result<Self> {
        let layer = MultiSsmLayer {
            ssms,
            skip,
            ffn,
            frozen,
            cache: FilterCache::new(),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.ssms.first() else {
            return Err(SsmError::invalid("ssms", "a layer needs at least one SSM"));
        };
        for ssm in &self.ssms {
            check_len("layer SSM state size", first.dim(), ssm.dim())?;
            ssm.validate()?;
            if ssm.skip != 0.0 {
                return Err(SsmError::invalid("ssms", "member SSMs carry D = 0; use the layer skip"));
            }
        }
        check_len("layer skip", self.ssms.len(), self.skip.len())?;
        check_finite("layer skip", &self.skip)?;
        if let Some(ffn) = &self.ffn {
            ffn.validate(self.width())?;
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.ssms.len()
    }

    pub fn state_size(&self) -> usize {
        self.ssms[0].dim()
    }

    pub fn cache(&self) -> &FilterCache {
        &self.cache
    }

    /// Convolution mode: filters from cached plans, applied by FFT.
    pub fn forward(&self, u: &Channels, exec: Execution) -> Result<Channels> {
        let len = check_channels("layer input", self.width(), u)?;
        let per_channel = map_indexed(exec, self.width(), |i| -> Result<Vec<f64>> {
            let plan = self.cache.get_or_build(&self.ssms[i], len)?;
            let mut y = apply_filter(&plan.f_y, &u[i])?;
            for (yk, uk) in y.iter_mut().zip(&u[i]) {
                *yk += self.skip[i] * uk;
            }
            Ok(y)
        });
        let y = per_channel.into_iter().collect::<Result<Channels>>()?;
        Ok(self.finish(y))
    }

    /// Recurrent mode: each channel scanned step by step.
    pub fn forward_recurrent(&self, u: &Channels) -> Result<Channels> {
        check_channels("layer input", self.width(), u)?;
        let y = self
            .ssms
            .iter()
            .zip(u)
            .zip(&self.skip)
            .map(|((ssm, ui), &d)| scan(ssm, ui).post.iter().zip(ui).map(|(y, x)| y + d * x).collect())
            .collect();
        Ok(self.finish(y))
    }

    fn finish(&self, y: Channels) -> Channels {
        match &self.ffn {
            Some(ffn) => ffn.apply(&y),
            None => y,
        }
    }
}

fn check_channels(context: &'static str, expected: usize, u: &Channels) -> Result<usize> {
    check_len(context, expected, u.len())?;
    let len = u.first().map_or(0, Vec::len);
    if len == 0 {
        return Err(SsmError::invalid("input", "sequence length must be at least 1"));
    }
    for row in u {
        check_len(context, len, row.len())?;
        check_finite(context, row)?;
    }
    Ok(len)
}

/// Maps `m` input features to `s` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// Channel `j` copies feature `j mod m`.
    RepeatedIdentity { m: usize, s: usize },
    /// `s×m` weights.
    Linear { weights: Vec<Vec<f64>> },
}

impl Encoder {
    pub fn input_width(&self) -> usize {
        match self {
            Encoder::RepeatedIdentity { m, .. } => *m,
            Encoder::Linear { weights } => weights.first().map_or(0, Vec::len),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Encoder::RepeatedIdentity { s, .. } => *s,
            Encoder::Linear { weights } => weights.len(),
        }
    }

    pub fn apply(&self, u: &Channels) -> Channels {
        match self {
            Encoder::RepeatedIdentity { m, s } => (0..*s).map(|j| u[j % m].clone()).collect(),
            Encoder::Linear { weights } => linear_map(weights, u),
        }
    }
}

fn linear_map(weights: &[Vec<f64>], u: &Channels) -> Channels {
    let len = u.first().map_or(0, Vec::len);
    weights
        .iter()
        .map(|row| {
            let mut out = vec![0.0; len];
            for (w, ui) in row.iter().zip(u) {
                if *w != 0.0 {
                    for (o, x) in out.iter_mut().zip(ui) {
                        *o += w * x;
                    }
                }
            }
            out
        })
        .collect()
}

/// Per-timestep `s → m` map (`m×s` weights, no bias).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub weights: Vec<Vec<f64>>,
}

impl Readout {
    pub fn apply(&self, z: &Channels) -> Channels {
        linear_map(&self.weights, z)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    RepeatedIdentity,
    Linear,
}

/// Shape of a forecasting network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input features.
    pub m: usize,
    /// Channels per layer.
    pub s: usize,
    /// State size of every SSM.
    pub d: usize,
    pub lag: usize,
    pub horizon: usize,
    /// Differencing channels in the preprocessing layer (orders cycle 0..=3).
    #[serde(default)]
    pub n_diff: usize,
    /// Moving-average-residual channels in the preprocessing layer.
    #[serde(default)]
    pub n_ma_residual: usize,
    #[serde(default = "default_open_layers")]
    pub open_layers: usize,
    #[serde(default)]
    pub ffn: bool,
    #[serde(default)]
    pub encoder: EncoderKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_open_layers() -> usize {
    1
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.s == 0 || self.d == 0 {
            return Err(SsmError::invalid("config", "m, s and d must be positive"));
        }
        if self.lag == 0 || self.horizon == 0 {
            return Err(SsmError::invalid("config", "lag and horizon must be positive"));
        }
        let pre = self.n_diff + self.n_ma_residual;
        if pre != 0 && pre != self.s {
            return Err(SsmError::invalid(
                "config",
                format!("preprocessing split {} + {} must equal s = {}", self.n_diff, self.n_ma_residual, self.s),
            ));
        }
        if self.n_diff > 0 && self.d < self.n_diff.min(4) {
            return Err(SsmError::invalid("config", format!("d = {} is too small for the differencing orders", self.d)));
        }
        if self.n_ma_residual > 0 && self.d < 4 {
            return Err(SsmError::invalid("config", "moving-average residual channels need d ≥ 4"));
        }
        if self.encoder == EncoderKind::RepeatedIdentity && self.s < self.m {
            return Err(SsmError::invalid("config", "repeated identity encoder needs s ≥ m"));
        }
        Ok(())
    }
}

/// How the decoder rolls forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RolloutMethod {
    /// O(hd) recurrence.
    #[default]
    Recurrent,
    /// Spectral rank-2 construction.
    Spectral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<NetworkConfig>,
    pub encoder: Encoder,
    pub layers: Vec<MultiSsmLayer>,
    /// Closed-loop decoder: one SSM per channel, each carrying `K`.
    pub decoder: Vec<Ssm>,
    pub readout: Readout,
    #[serde(skip)]
    exec: Execution,
}

impl Network {
    pub fn new(encoder: Encoder, layers: Vec<MultiSsmLayer>, decoder: Vec<Ssm>, readout: Readout) -> Result<Self> {
        let net = Network {
            schema: NETWORK_SCHEMA.to_owned(),
            config: None,
            encoder,
            layers,
            decoder,
            readout,
            exec: Execution::default(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Univariate network made of one decoder SSM and identity maps.
    pub fn from_decoder(ssm: Ssm) -> Result<Self> {
        Network::new(
            Encoder::RepeatedIdentity { m: 1, s: 1 },
            Vec::new(),
            vec![ssm],
            Readout { weights: vec![vec![1.0]] },
        )
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != NETWORK_SCHEMA {
            return Err(SsmError::invalid("schema", format!("expected {NETWORK_SCHEMA:?}, got {:?}", self.schema)));
        }
        let m = self.encoder.input_width();
        let mut width = self.encoder.output_width();
        if m == 0 || width == 0 {
            return Err(SsmError::invalid("encoder", "widths must be positive"));
        }
        if let Encoder::Linear { weights } = &self.encoder {
            for row in weights {
                check_len("encoder weights", m, row.len())?;
                check_finite("encoder weights", row)?;
            }
        }
        for layer in &self.layers {
            layer.validate()?;
            check_len("layer width", width, layer.width())?;
            width = layer.width();
        }
        check_len("decoder width", width, self.decoder.len())?;
        for ssm in &self.decoder {
            ssm.validate()?;
        }
        check_len("readout rows", m, self.readout.weights.len())?;
        for row in &self.readout.weights {
            check_len("readout cols", width, row.len())?;
            check_finite("readout weights", row)?;
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_width()
    }

    /// Encoder and open-loop layers: the sequence the decoder consumes.
    pub fn decoder_inputs(&self, u: &Channels) -> Result<Channels> {
        check_channels("network input", self.input_width(), u)?;
        let mut z = self.encoder.apply(u);
        for layer in &self.layers {
            z = layer.forward(&z, self.exec)?;
        }
        Ok(z)
    }

    /// [`Network::decoder_inputs`] with every layer evaluated recurrently.
    pub fn decoder_inputs_recurrent(&self, u: &Channels) -> Result<Channels> {
        check_channels("network input", self.input_width(), u)?;
        let mut z = self.encoder.apply(u);
        for layer in &self.layers {
            z = layer.forward_recurrent(&z)?;
        }
        Ok(z)
    }

    /// Next-step predictions over the lag window: output `k` predicts `u_{k+1}`.
    pub fn open_loop_forward(&self, u: &Channels) -> Result<Channels> {
        let z = self.decoder_inputs(u)?;
        let len = z[0].len();
        let y = map_indexed(self.exec, self.decoder.len(), |i| -> Result<Vec<f64>> {
            let plan = crate::filter::FilterPlan::build(&self.decoder[i], len)?;
            apply_filter(&plan.f_y, &z[i])
        });
        Ok(self.readout.apply(&y.into_iter().collect::<Result<Channels>>()?))
    }

    /// [`Network::open_loop_forward`] evaluated step by step.
    pub fn open_loop_forward_recurrent(&self, u: &Channels) -> Result<Channels> {
        let z = self.decoder_inputs_recurrent(u)?;
        let y: Channels = self.decoder.iter().zip(&z).map(|(ssm, zi)| scan(ssm, zi).post).collect();
        Ok(self.readout.apply(&y))
    }

    /// `h`-step forecast after the lag window `u` (`m×ℓ` → `m×h`).
    ///
    /// Step 1 is the open-loop prediction `C x_ℓ`; later steps come from the
    /// closed loop, `C (A+BK)^j x_ℓ` for `j = 1..h−1`. `D` is not used.
    pub fn forecast(&self, u: &Channels, h: usize) -> Result<Channels> {
        self.forecast_with(u, h, RolloutMethod::Recurrent)
    }

    pub fn forecast_with(&self, u: &Channels, h: usize, method: RolloutMethod) -> Result<Channels> {
        if h == 0 {
            return Err(SsmError::invalid("horizon", "must be at least 1"));
        }
        if h > 1 {
            for ssm in &self.decoder {
                ssm.k_or_err()?;
            }
        }
        let z = self.decoder_inputs(u)?;
        let rolled = map_indexed(self.exec, self.decoder.len(), |i| -> Result<Vec<f64>> {
            let ssm = &self.decoder[i];
            let x = last_state(ssm, &z[i]);
            let mut y = Vec::with_capacity(h);
            y.push(dot(&ssm.c, &x));
            if h > 1 {
                let rest = match method {
                    RolloutMethod::Recurrent => closed_loop_rollout(ssm, &x, h - 1)?.y,
                    RolloutMethod::Spectral => fast_closed_loop_rollout(ssm, &x, h - 1)?,
                };
                y.extend(rest);
            }
            Ok(y)
        });
        Ok(self.readout.apply(&rolled.into_iter().collect::<Result<Channels>>()?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn random_companion_ssm(rng: &mut ChaCha8Rng, d: usize) -> Result<Ssm> {
    let scale = 1.0 / d as f64;
    let a = normalize_stability(&gaussian_vec(rng, d, scale));
    let bc_std = scale.sqrt();
    Ssm::new(
        CompanionMatrix::new(a)?,
        gaussian_vec(rng, d, bc_std),
        gaussian_vec(rng, d, bc_std),
        0.0,
        None,
    )
}

/// Builds the forecasting network shape: optional frozen preprocessing layer,
/// `open_layers` trainable companion layers and a closed-loop decoder.
///
/// Companion `a` vectors are drawn from `N(0, 1/d²)` and L1-normalized; `B`
/// and `C` from `N(0, 1/d)`. Decoder `K` starts at zero.
pub fn build_forecast_network(config: &NetworkConfig) -> Result<Network> {
    config.validate()?;
    let NetworkConfig { m, s, d, .. } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let encoder = match config.encoder {
        EncoderKind::RepeatedIdentity => Encoder::RepeatedIdentity { m, s },
        EncoderKind::Linear => Encoder::Linear {
            weights: (0..s).map(|_| gaussian_vec(&mut rng, m, 1.0 / (m as f64).sqrt())).collect(),
        },
    };

    let mut layers = Vec::new();
    if config.n_diff + config.n_ma_residual > 0 {
        let mut ssms = Vec::with_capacity(s);
        for j in 0..config.n_diff {
            ssms.push(Ssm::shift_with_output(diff_c_vector(j % 4, d)?)?);
        }
        for _ in 0..config.n_ma_residual {
            let n = rng.gen_range(4..=d);
            ssms.push(Ssm::shift_with_output(ma_residual_c(n, d)?)?);
        }
        layers.push(MultiSsmLayer::new(ssms, vec![0.0; s], None, true)?);
    }
    for _ in 0..config.open_layers {
        let ssms = (0..s).map(|_| random_companion_ssm(&mut rng, d)).collect::<Result<Vec<_>>>()?;
        let ffn = config.ffn.then(|| {
            let f = 2 * s;
            Ffn {
                w1: (0..s).map(|_| gaussian_vec(&mut rng, f, 1.0 / (s as f64).sqrt())).collect(),
                b1: vec![0.0; f],
                w2: (0..f).map(|_| gaussian_vec(&mut rng, s, 1.0 / (f as f64).sqrt())).collect(),
                b2: vec![0.0; s],
            }
        });
        layers.push(MultiSsmLayer::new(ssms, vec![1.0; s], ffn, false)?);
    }

    let decoder = (0..s)
        .map(|_| {
            let mut ssm = random_companion_ssm(&mut rng, d)?;
            ssm.k = Some(vec![0.0; d]);
            Ok(ssm)
        })
        .collect::<Result<Vec<_>>>()?;

    let readout = match config.encoder {
        EncoderKind::RepeatedIdentity => {
            let weights = (0..m)
                .map(|i| {
                    let count = (0..s).filter(|j| j % m == i).count() as f64;
                    (0..s).map(|j| if j % m == i { 1.0 / count } else { 0.0 }).collect()
                })
                .collect();
            Readout { weights }
        }
        EncoderKind::Linear => Readout {
            weights: (0..m).map(|_| gaussian_vec(&mut rng, s, 1.0 / (s as f64).sqrt())).collect(),
        },
    };

    let mut net = Network::new(encoder, layers, decoder, readout)?;
    net.config = Some(config.clone());
    Ok(net)
}

/// Identity single-channel layer: `C = 0`, `D = 1`.
pub fn identity_layer(d: usize) -> Result<MultiSsmLayer> {
    let ssm = Ssm::shift_with_output(vec![0.0; d])?;
    MultiSsmLayer::new(vec![ssm], vec![1.0], None, true)
}

/// Decoder SSM whose open-loop output reproduces its input: `C = e_1` on a shift.
pub fn passthrough_decoder(d: usize) -> Result<Ssm> {
    Ssm::shift_with_output(unit_vector(d, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructions::ar_to_ssm;

    fn config(s: usize, d: usize) -> NetworkConfig {
        NetworkConfig {
            m: 1,
            s,
            d,
            lag: 32,
            horizon: 8,
            n_diff: 0,
            n_ma_residual: 0,
            open_layers: 1,
            ffn: false,
            encoder: EncoderKind::RepeatedIdentity,
            seed: 3,
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-3.0) + 0.003_637_392_081_772_994).abs() < 1e-12);
    }

    #[test]
    fn identity_layer_passes_input() {
        let layer = identity_layer(4).unwrap();
        let u = vec![vec![1.0, -2.0, 3.5, 0.25]];
        assert_eq!(layer.forward(&u, Execution::Sequential).unwrap(), u);
    }

    #[test]
    fn differencing_layer_on_cubic() {
        let ssms = (0..4).map(|o| Ssm::shift_with_output(diff_c_vector(o, 4).unwrap()).unwrap()).collect();
        let layer = MultiSsmLayer::new(ssms, vec![0.0; 4], None, true).unwrap();
        let cubic: Vec<f64> = (0..40).map(|k| (k as f64).powi(3)).collect();
        let y = layer.forward(&vec![cubic; 4], Execution::Parallel).unwrap();
        assert!(y[3][4..].iter().all(|v| (v - 6.0).abs() < 1e-6));
    }

    #[test]
    fn layer_rejects_member_skip() {
        let mut ssm = Ssm::shift_with_output(vec![1.0, 0.0]).unwrap();
        ssm.skip = 1.0;
        assert!(MultiSsmLayer::new(vec![ssm], vec![0.0], None, false).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = config(8, 8);
        c.n_diff = 4;
        c.n_ma_residual = 3;
        assert!(build_forecast_network(&c).is_err());
        c.n_ma_residual = 4;
        assert!(build_forecast_network(&c).is_ok());
        c.d = 3;
        assert!(build_forecast_network(&c).is_err());
    }

    #[test]
    fn builder_layer_one_rows() {
        let mut c = config(8, 8);
        c.n_diff = 4;
        c.n_ma_residual = 4;
        let net = build_forecast_network(&c).unwrap();
        let pre = &net.layers[0];
        assert!(pre.frozen);
        for o in 0..4 {
            assert_eq!(pre.ssms[o].c, diff_c_vector(o, 8).unwrap());
        }
        for ssm in &pre.ssms[4..] {
            let n = ssm.c.iter().filter(|&&v| v != 0.0).count();
            assert!((4..=8).contains(&n));
            assert_eq!(ssm.c, ma_residual_c(n, 8).unwrap());
        }
        assert_eq!(net.layers.len(), 2);
    }

    #[test]
    fn single_ssm_degenerate_network() {
        let mut c = config(1, 4);
        c.open_layers = 0;
        let net = build_forecast_network(&c).unwrap();
        assert!(net.layers.is_empty());
        assert_eq!(net.decoder.len(), 1);
        assert_eq!(net.readout.weights, vec![vec![1.0]]);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let mut c = config(4, 6);
        c.ffn = true;
        c.n_diff = 2;
        c.n_ma_residual = 2;
        let a = build_forecast_network(&c).unwrap().to_json().unwrap();
        let b = build_forecast_network(&c).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let back = Network::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
        assert!(a.contains(NETWORK_SCHEMA));
    }

    #[test]
    fn forecast_errors() {
        let net = Network::from_decoder(ar_to_ssm(&[0.5]).unwrap()).unwrap();
        let u = vec![vec![1.0, 2.0]];
        assert!(net.forecast(&u, 0).is_err());
        assert!(net.forecast(&u, 1).is_ok());
        assert!(matches!(net.forecast(&u, 2), Err(SsmError::MissingK)));
        assert!(net.forecast(&vec![vec![1.0], vec![2.0]], 1).is_err());
    }

    #[test]
    fn passthrough_reproduces_input() {
        let net = Network::from_decoder(passthrough_decoder(3).unwrap()).unwrap();
        let u = vec![vec![4.0, 1.0, -3.0, 2.0]];
        assert_eq!(net.open_loop_forward(&u).unwrap(), u);
    }
}
