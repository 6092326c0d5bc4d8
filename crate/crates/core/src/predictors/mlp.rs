//! Forward-only feedforward network with test-time dropout.
//!
//! Hidden layer `k` computes `z_{k+1} = sigma(W_k z_k + b_k)`; when the layer
//! is flagged the activations are multiplied by a Bernoulli(1 - p) mask and
//! rescaled by `1 / (1 - p)` (inverted dropout). The output layer is affine.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::distr::{Bernoulli, Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Lane, StochasticEvaluator, StreamKey};
use crate::error::{Error, Result};

const MAGIC: &str = "mlmc-dropout-mlp";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::WeightFormat(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture of the network: `[n_in, hidden..., n_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    /// One flag per hidden layer.
    pub dropout_layer_flags: Vec<bool>,
    pub p_drop: f64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::ShapeMismatch(
                "need input, at least one hidden layer and output widths".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::ShapeMismatch("layer widths must be positive".into()));
        }
        let hidden = self.layer_widths.len() - 2;
        if self.dropout_layer_flags.len() != hidden {
            return Err(Error::ShapeMismatch(format!(
                "{} dropout flags for {hidden} hidden layers",
                self.dropout_layer_flags.len()
            )));
        }
        if !self.dropout_layer_flags.iter().any(|&f| f) {
            return Err(Error::ShapeMismatch("at least one hidden layer must carry dropout".into()));
        }
        check_probability(self.p_drop)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// Weights and biases of one affine map, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    #[inline]
    fn affine(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.cols).zip(&self.bias) {
            out.push(row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub layers: Vec<DenseLayer>,
}

impl MlpWeights {
    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        let expected = spec.layer_widths.len() - 1;
        if self.layers.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} weight layers, architecture needs {expected}",
                self.layers.len()
            )));
        }
        for (k, (layer, pair)) in self.layers.iter().zip(spec.layer_widths.windows(2)).enumerate() {
            let (cols, rows) = (pair[0], pair[1]);
            if layer.rows != rows || layer.cols != cols || layer.weights.len() != rows * cols || layer.bias.len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k}: expected {rows}x{cols} weights and {rows} biases"
                )));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("weights of layer {k}")));
            }
        }
        Ok(())
    }

    /// Glorot-uniform weights and small uniform biases from a seed.
    pub fn random(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|pair| {
                let (cols, rows) = (pair[0], pair[1]);
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let w = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let b = Uniform::new_inclusive(-0.1, 0.1).expect("finite bounds");
                DenseLayer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| w.sample(&mut rng)).collect(),
                    bias: (0..rows).map(|_| b.sample(&mut rng)).collect(),
                }
            })
            .collect();
        Self { layers }
    }
}

/// Bernoulli(1 - p_drop) keep-mask of the given width, fixed by `key`.
pub fn draw_mask(width: usize, p_drop: f64, key: StreamKey) -> Result<Vec<bool>> {
    check_probability(p_drop)?;
    let keep = Bernoulli::new(1.0 - p_drop).map_err(|_| Error::InvalidProbability(p_drop))?;
    let mut rng = key.rng();
    Ok((0..width).map(|_| keep.sample(&mut rng)).collect())
}

fn check_shapes(spec: &MlpSpec, weights: &MlpWeights, x: &[f64]) -> Result<()> {
    spec.validate()?;
    weights.validate(spec)?;
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

// Shared kernel; `key = None` is the deterministic network.
fn forward(spec: &MlpSpec, weights: &MlpWeights, x: &[f64], key: Option<StreamKey>, out: &mut [f64]) {
    let mut z = x.to_vec();
    let mut next = Vec::with_capacity(spec.layer_widths.iter().copied().max().unwrap_or(0));
    let (hidden, last) = weights.layers.split_at(weights.layers.len() - 1);
    let scale = 1.0 / (1.0 - spec.p_drop);
    let keep = Bernoulli::new(1.0 - spec.p_drop).expect("validated probability");
    for (k, layer) in hidden.iter().enumerate() {
        layer.affine(&z, &mut next);
        for v in next.iter_mut() {
            *v = spec.activation.apply(*v);
        }
        if let (Some(key), true) = (key, spec.dropout_layer_flags[k]) {
            let mut rng = key.with_lane(Lane::Mask(k as u32)).rng();
            for v in next.iter_mut() {
                *v = if keep.sample(&mut rng) { *v * scale } else { 0.0 };
            }
        }
        std::mem::swap(&mut z, &mut next);
    }
    last[0].affine(&z, &mut next);
    out.copy_from_slice(&next);
}

/// One stochastic forward pass under `key`.
pub fn forward_dropout(spec: &MlpSpec, weights: &MlpWeights, x: &[f64], key: StreamKey) -> Result<Vec<f64>> {
    check_shapes(spec, weights, x)?;
    let mut out = vec![0.0; spec.output_dim()];
    forward(spec, weights, x, Some(key), &mut out);
    Ok(out)
}

/// The network with dropout switched off.
pub fn forward_deterministic(spec: &MlpSpec, weights: &MlpWeights, x: &[f64]) -> Result<Vec<f64>> {
    check_shapes(spec, weights, x)?;
    let mut out = vec![0.0; spec.output_dim()];
    forward(spec, weights, x, None, &mut out);
    Ok(out)
}

/// A validated network usable as a [`StochasticEvaluator`].
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMlp {
    spec: MlpSpec,
    weights: MlpWeights,
}

impl DropoutMlp {
    pub fn new(spec: MlpSpec, weights: MlpWeights) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn random(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let weights = MlpWeights::random(&spec, seed);
        Self::new(spec, weights)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &MlpWeights {
        &self.weights
    }

    pub fn deterministic(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward_deterministic(&self.spec, &self.weights, x)
    }

    /// Serialises to the text weight format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(s, "layer_widths {}", join(&mut self.spec.layer_widths.iter().map(|w| w.to_string())));
        let _ = writeln!(s, "activation {}", self.spec.activation.name());
        let _ = writeln!(
            s,
            "dropout_layers {}",
            join(&mut self.spec.dropout_layer_flags.iter().map(|&f| u8::from(f).to_string()))
        );
        let _ = writeln!(s, "p_drop {}", self.spec.p_drop);
        for (k, layer) in self.weights.layers.iter().enumerate() {
            let _ = writeln!(s, "weights {k} {} {}", layer.rows, layer.cols);
            for row in layer.weights.chunks_exact(layer.cols) {
                let _ = writeln!(s, "{}", join(&mut row.iter().map(|v| v.to_string())));
            }
            let _ = writeln!(s, "bias {k} {}", layer.rows);
            let _ = writeln!(s, "{}", join(&mut layer.bias.iter().map(|v| v.to_string())));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut next_line = |what: &str| lines.next().ok_or_else(|| Error::WeightFormat(format!("missing {what}")));

        let header: Vec<&str> = next_line("header")?.split_whitespace().collect();
        if header.first() != Some(&MAGIC) || header.get(1) != Some(&"1") {
            return Err(Error::WeightFormat(format!("expected `{MAGIC} {FORMAT_VERSION}` header")));
        }
        let layer_widths: Vec<usize> = parse_list(keyed(next_line("layer_widths")?, "layer_widths")?)?;
        let activation: Activation = keyed(next_line("activation")?, "activation")?.parse()?;
        let dropout_layer_flags = parse_list::<u8>(keyed(next_line("dropout_layers")?, "dropout_layers")?)?
            .into_iter()
            .map(|f| match f {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::WeightFormat(format!("dropout flag must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let p_drop: f64 = parse_one(keyed(next_line("p_drop")?, "p_drop")?)?;
        let spec = MlpSpec {
            layer_widths,
            activation,
            dropout_layer_flags,
            p_drop,
        };
        spec.validate()?;

        let mut layers = Vec::new();
        for (k, pair) in spec.layer_widths.windows(2).enumerate() {
            let (cols, rows) = (pair[0], pair[1]);
            let dims: Vec<usize> = parse_list(keyed(next_line("weights block")?, "weights")?)?;
            if dims != [k, rows, cols] {
                return Err(Error::ShapeMismatch(format!(
                    "weights block {k}: header says {dims:?}, architecture needs [{k}, {rows}, {cols}]"
                )));
            }
            let mut weights = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row: Vec<f64> = parse_list(next_line("weight row")?)?;
                if row.len() != cols {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {k} row {r}: {} values, expected {cols}",
                        row.len()
                    )));
                }
                weights.extend(row);
            }
            let bdims: Vec<usize> = parse_list(keyed(next_line("bias block")?, "bias")?)?;
            if bdims != [k, rows] {
                return Err(Error::ShapeMismatch(format!("bias block {k}: header says {bdims:?}")));
            }
            let bias: Vec<f64> = parse_list(next_line("bias values")?)?;
            if bias.len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k}: {} biases, expected {rows}",
                    bias.len()
                )));
            }
            layers.push(DenseLayer { rows, cols, weights, bias });
        }
        if let Some(extra) = lines.next() {
            return Err(Error::WeightFormat(format!("trailing content: `{extra}`")));
        }
        Self::new(spec, MlpWeights { layers })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::WeightFormat(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}

fn keyed<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .filter(|rest| rest.starts_with(char::is_whitespace))
        .map(str::trim)
        .ok_or_else(|| Error::WeightFormat(format!("expected `{key}` line, got `{line}`")))
}

fn parse_one<T: FromStr>(tok: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::WeightFormat(format!("cannot parse `{tok}`")))
}

fn parse_list<T: FromStr>(line: &str) -> Result<Vec<T>> {
    line.split_whitespace().map(parse_one).collect()
}

impl StochasticEvaluator for DropoutMlp {
    fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn sample_into(&self, x: &[f64], key: StreamKey, out: &mut [f64]) {
        forward(&self.spec, &self.weights, x, Some(key), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empirical_keep_rate(width: usize, p: f64, n: u64) -> f64 {
        let mut kept = 0u64;
        for i in 0..n {
            kept += draw_mask(width, p, StreamKey::new(5, i, 0, 1)).unwrap().iter().filter(|&&b| b).count() as u64;
        }
        kept as f64 / (n * width as u64) as f64
    }

    fn small_spec(p: f64) -> MlpSpec {
        MlpSpec {
            layer_widths: vec![1, 8, 8, 2],
            activation: Activation::Tanh,
            dropout_layer_flags: vec![true, true],
            p_drop: p,
        }
    }

    #[test]
    fn mask_rejects_bad_probability() {
        assert_eq!(draw_mask(3, 0.0, StreamKey::new(0, 0, 0, 0)), Err(Error::InvalidProbability(0.0)));
        assert!(draw_mask(3, 1.0, StreamKey::new(0, 0, 0, 0)).is_err());
        assert!(draw_mask(3, f64::NAN, StreamKey::new(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn mask_with_vanishing_p_keeps_everything() {
        for i in 0..10_000 {
            let m = draw_mask(4, 1e-12, StreamKey::new(1, i, 0, 1)).unwrap();
            assert_eq!(m, vec![true; 4]);
        }
    }

    #[test]
    fn mask_is_deterministic() {
        let k = StreamKey::new(3, 4, 5, 6);
        assert_eq!(draw_mask(1, 0.5, k).unwrap(), draw_mask(1, 0.5, k).unwrap());
        assert_eq!(draw_mask(64, 0.5, k).unwrap(), draw_mask(64, 0.5, k).unwrap());
    }

    #[test]
    fn mask_keep_rate() {
        // Bernoulli(0.9) over 6.4e6 entries: SE ~ 1.2e-4, far inside 0.01
        let rate = empirical_keep_rate(64, 0.1, 100_000);
        assert!((rate - 0.9).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn vanishing_dropout_matches_deterministic_pass() {
        let net = DropoutMlp::random(small_spec(1e-12), 9).unwrap();
        for (i, x) in [0.0, 0.3, 0.9].into_iter().enumerate() {
            let det = net.deterministic(&[x]).unwrap();
            let sto = forward_dropout(net.spec(), net.weights(), &[x], StreamKey::new(2, i as u64, 0, 1)).unwrap();
            for (a, b) in det.iter().zip(&sto) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = DropoutMlp::random(small_spec(0.3), 1).unwrap();
        let k = StreamKey::new(8, 1, 2, 3);
        let a = forward_dropout(net.spec(), net.weights(), &[0.25], k).unwrap();
        let b = forward_dropout(net.spec(), net.weights(), &[0.25], k).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn shape_errors() {
        let net = DropoutMlp::random(small_spec(0.3), 1).unwrap();
        assert!(forward_dropout(net.spec(), net.weights(), &[0.1, 0.2], StreamKey::new(0, 0, 0, 0)).is_err());
        let mut bad = net.weights().clone();
        bad.layers[1].bias.pop();
        assert!(forward_dropout(net.spec(), &bad, &[0.1], StreamKey::new(0, 0, 0, 0)).is_err());
        let mut no_drop = small_spec(0.3);
        no_drop.dropout_layer_flags = vec![false, false];
        assert!(no_drop.validate().is_err());
    }

    #[test]
    fn inverted_dropout_preserves_the_mean() {
        // 1 -> 2 -> 1, near-identity weights, mask after the activation
        let spec = MlpSpec {
            layer_widths: vec![1, 2, 1],
            activation: Activation::Tanh,
            dropout_layer_flags: vec![true],
            p_drop: 0.5,
        };
        let weights = MlpWeights {
            layers: vec![
                DenseLayer { rows: 2, cols: 1, weights: vec![1.0, 1.0], bias: vec![0.0, 0.0] },
                DenseLayer { rows: 1, cols: 2, weights: vec![1.0, 0.0], bias: vec![0.0] },
            ],
        };
        let x = [0.8];
        let det = forward_deterministic(&spec, &weights, &x).unwrap()[0];
        let n = 1_000_000u64;
        let (mut s, mut ss) = (0.0, 0.0);
        for i in 0..n {
            let v = forward_dropout(&spec, &weights, &x, StreamKey::new(4, i, 0, 1)).unwrap()[0];
            s += v;
            ss += v * v;
        }
        let mean = s / n as f64;
        let se = ((ss / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - det).abs() < 3.0 * se, "mean {mean} det {det} se {se}");
    }

    #[test]
    fn text_format_round_trips() {
        let net = DropoutMlp::random(small_spec(0.1), 77).unwrap();
        let back = DropoutMlp::from_text(&net.to_text()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn text_format_rejects_shape_disagreement() {
        let net = DropoutMlp::random(small_spec(0.1), 77).unwrap();
        let text = net.to_text().replacen("layer_widths 1 8 8 2", "layer_widths 1 8 7 2", 1);
        assert!(matches!(DropoutMlp::from_text(&text), Err(Error::ShapeMismatch(_))));
        let truncated: String = net.to_text().lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(DropoutMlp::from_text(&truncated).is_err());
        assert!(DropoutMlp::from_text("not a weight file").is_err());
    }
}
