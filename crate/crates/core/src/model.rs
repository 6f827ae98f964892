//! Fully connected ReLU regression network over the autodiff tape.
//!
//! Parameters are stored flat in a [`ParamVector`]; the [`Layout`] records the
//! name and shape of every weight matrix and bias row in order. Weights are
//! `fan_in × fan_out` so a batch `X` (`n × fan_in`) maps to `X·W + b`.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(specs: Vec<TensorSpec>) -> Self {
        Self { specs }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    /// Total entry count.
    pub fn size(&self) -> usize {
        self.specs.iter().map(|s| s.shape.len()).sum()
    }
}

/// Flat model parameters tagged with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    entries: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, entries: Vec<f64>) -> Result<Self> {
        let expected = layout.size();
        if entries.len() != expected {
            return Err(Error::EntryCount {
                expected,
                got: entries.len(),
            });
        }
        Ok(Self { layout, entries })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.size();
        Self {
            layout,
            entries: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    /// Same layout, new entries.
    pub fn with_entries(&self, entries: Vec<f64>) -> Result<Self> {
        Self::new(Arc::clone(&self.layout), entries)
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    /// `self + c·other`
    pub fn add_scaled(&self, other: &ParamVector, c: f64) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            layout: Arc::clone(&self.layout),
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            layout: Arc::clone(&self.layout),
            entries: self.entries.iter().map(|v| c * v).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Slices of the flat entries, one per layout record.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut offset = 0;
        self.layout
            .specs
            .iter()
            .map(|s| {
                let n = s.shape.len();
                let t = Tensor::new(s.shape, self.entries[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect()
    }

    /// Places the parameters on a tape, as leaves or as constants.
    pub fn to_tape<'t>(&self, tape: &'t Tape, differentiable: bool) -> ParamVars<'t> {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| {
                if differentiable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        ParamVars {
            layout: Arc::clone(&self.layout),
            vars,
        }
    }

    /// Text serialization: a version tag, the layout, then the entries in
    /// round-trip exact decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{PARAMS_MAGIC}").unwrap();
        writeln!(out, "layout {}", self.layout.specs.len()).unwrap();
        for s in &self.layout.specs {
            writeln!(out, "{} {} {}", s.name, s.shape.rows, s.shape.cols).unwrap();
        }
        writeln!(out, "entries {}", self.entries.len()).unwrap();
        for v in &self.entries {
            writeln!(out, "{v:?}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (n, magic) = next_line(&mut lines)?;
        if magic != PARAMS_MAGIC {
            return Err(parse_err(
                n,
                format!("expected {PARAMS_MAGIC:?}, found {magic:?}"),
            ));
        }
        let params = Self::parse_after_magic(&mut lines)?;
        if let Some((n, l)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(parse_err(n, format!("trailing content {l:?}")));
        }
        Ok(params)
    }

    /// Parses the body following the version line, consuming only its lines.
    pub(crate) fn parse_after_magic<'a>(
        lines: &mut impl Iterator<Item = (usize, &'a str)>,
    ) -> Result<Self> {
        let count = tagged_count(lines, "layout")?;
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, l) = next_line(lines)?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(parse_err(n, format!("bad layout record {l:?}")));
            };
            let dim = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| parse_err(n, format!("bad dimension {s:?}: {e}")))
            };
            specs.push(TensorSpec {
                name: name.to_string(),
                shape: Shape::new(dim(rows)?, dim(cols)?),
            });
        }
        let count = tagged_count(lines, "entries")?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, l) = next_line(lines)?;
            entries.push(
                l.parse::<f64>()
                    .map_err(|e| parse_err(n, format!("bad entry {l:?}: {e}")))?,
            );
        }
        Self::new(Arc::new(Layout::new(specs)), entries)
    }
}

pub(crate) const PARAMS_MAGIC: &str = "maltml-params v1";

fn parse_err(line: usize, msg: String) -> Error {
    Error::Parse { line, msg }
}

pub(crate) fn next_line<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
) -> Result<(usize, &'a str)> {
    lines.next().ok_or(Error::Parse {
        line: 0,
        msg: "unexpected end of input".into(),
    })
}

fn tagged_count<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    tag: &str,
) -> Result<usize> {
    let (n, l) = next_line(lines)?;
    l.strip_prefix(tag)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| parse_err(n, format!("expected `{tag} <count>`, found {l:?}")))
}

/// Parameters living on a tape, one node per layout record.
#[derive(Clone, Debug)]
pub struct ParamVars<'t> {
    layout: Arc<Layout>,
    vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// `self - step·grads`, kept on the tape so the result stays
    /// differentiable with respect to both operands.
    pub fn descend(&self, grads: &[Var<'t>], step: f64) -> Result<ParamVars<'t>> {
        if grads.len() != self.vars.len() {
            return Err(Error::LayoutMismatch);
        }
        let vars = self
            .vars
            .iter()
            .zip(grads)
            .map(|(p, g)| p.sub(g.scale(step)))
            .collect::<std::result::Result<_, _>>()?;
        Ok(ParamVars {
            layout: Arc::clone(&self.layout),
            vars,
        })
    }

    /// Constant copies, cut off from the graph.
    pub fn detach(&self) -> ParamVars<'t> {
        ParamVars {
            layout: Arc::clone(&self.layout),
            vars: self.vars.iter().map(Var::detach).collect(),
        }
    }

    pub fn to_param_vector(&self) -> ParamVector {
        let entries = self
            .vars
            .iter()
            .flat_map(|v| v.value().data().to_vec())
            .collect();
        ParamVector {
            layout: Arc::clone(&self.layout),
            entries,
        }
    }
}

/// Flattens per-tensor values (for example gradients) into a vector with
/// the given layout.
pub fn flatten_vars(layout: &Arc<Layout>, vars: &[Var<'_>]) -> Result<ParamVector> {
    let entries: Vec<f64> = vars
        .iter()
        .flat_map(|v| v.value().data().to_vec())
        .collect();
    ParamVector::new(Arc::clone(layout), entries)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl ModelSpec {
    /// One input, two hidden layers of 40 ReLU units, one output.
    pub fn regression() -> Self {
        Self {
            input_dim: 1,
            hidden: vec![40, 40],
            output_dim: 1,
        }
    }

    /// Regression network that also receives amplitude and phase as inputs.
    pub fn oracle() -> Self {
        Self {
            input_dim: 3,
            ..Self::regression()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn layout(&self) -> Layout {
        let widths = self.widths();
        let mut specs = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            specs.push(TensorSpec {
                name: format!("w{}", i + 1),
                shape: Shape::new(pair[0], pair[1]),
            });
            specs.push(TensorSpec {
                name: format!("b{}", i + 1),
                shape: Shape::new(1, pair[1]),
            });
        }
        Layout::new(specs)
    }

    /// Deterministic initialization: weights uniform in ±1/sqrt(fan_in)
    /// (variance 1/(3·fan_in), the usual default for linear layers), biases
    /// zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layout = Arc::new(self.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(layout.size());
        for spec in layout.specs() {
            if spec.shape.rows == 1 && spec.name.starts_with('b') {
                entries.extend(std::iter::repeat_n(0.0, spec.shape.len()));
            } else {
                let bound = 1.0 / (spec.shape.rows as f64).sqrt();
                entries.extend((0..spec.shape.len()).map(|_| rng.gen_range(-bound..bound)));
            }
        }
        ParamVector { layout, entries }
    }

    /// Differentiable predictions for a batch `x` of shape `n × input_dim`.
    pub fn forward<'t>(&self, params: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let width = x.shape().cols;
        if width != self.input_dim {
            return Err(Error::WidthMismatch {
                expected: self.input_dim,
                got: width,
            });
        }
        if params.layout.as_ref() != &self.layout() {
            return Err(Error::LayoutMismatch);
        }
        let layers = params.vars.chunks_exact(2);
        let last = layers.len() - 1;
        let mut h = x;
        for (i, wb) in layers.enumerate() {
            h = h.matmul(wb[0])?.add_row(wb[1])?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Plain-valued predictions, no gradients.
    pub fn predict(&self, params: &ParamVector, x: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let y = self.forward(&p, tape.constant(x.clone()))?;
        let out = y.value().data().to_vec();
        Ok(out)
    }
}

/// Mean of squared residuals between `pred` (`n × 1`) and `target`.
pub fn mse_loss<'t>(pred: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    if target.is_empty() || pred.shape().is_empty() {
        return Err(Error::EmptyBatch("mse_loss"));
    }
    if pred.shape().len() != target.len() {
        return Err(Error::WidthMismatch {
            expected: pred.shape().len(),
            got: target.len(),
        });
    }
    let t = pred
        .tape()
        .constant(Tensor::new(pred.shape(), target.to_vec()));
    Ok(pred.sub(t)?.square().mean()?)
}

/// Mean squared error computed on plain values.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;

    fn small() -> ModelSpec {
        ModelSpec {
            input_dim: 1,
            hidden: vec![3, 2],
            output_dim: 1,
        }
    }

    #[test]
    fn regression_layout_sizes() {
        let layout = ModelSpec::regression().layout();
        assert_eq!(layout.size(), 40 + 40 + 1600 + 40 + 40 + 1);
        let names: Vec<_> = layout.specs().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["w1", "b1", "w2", "b2", "w3", "b3"]);
        assert_eq!(
            ModelSpec::oracle().layout().size(),
            120 + 40 + 1600 + 40 + 40 + 1
        );
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::regression();
        let a = spec.init_params(7);
        assert_eq!(a, spec.init_params(7));
        assert_ne!(a, spec.init_params(8));
        let t = a.tensors();
        for (s, v) in a.layout().specs().iter().zip(&t) {
            if s.name.starts_with('b') {
                assert!(v.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn init_weight_variance_is_a_third_over_fan_in() {
        // 100 x 100 weight matrix = 10k draws with fan_in 100.
        let spec = ModelSpec {
            input_dim: 100,
            hidden: vec![100],
            output_dim: 1,
        };
        let p = spec.init_params(3);
        let w = &p.tensors()[0];
        let n = w.data().len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let target = 1.0 / (3.0 * 100.0);
        assert!((var / target - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn zero_params_predict_zero() {
        let spec = ModelSpec::regression();
        let p = ParamVector::zeros(Arc::new(spec.layout()));
        let y = spec
            .predict(&p, &Tensor::column(vec![-3.0, 0.5, 4.9]))
            .unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn batch_of_n_gives_n_outputs_and_width_is_checked() {
        let spec = ModelSpec::regression();
        let p = spec.init_params(0);
        let xs = Tensor::column((0..17).map(f64::from).collect());
        assert_eq!(spec.predict(&p, &xs).unwrap().len(), 17);
        let wide = Tensor::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(
            spec.predict(&p, &wide),
            Err(Error::WidthMismatch {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let spec = small();
        // Nonzero biases keep every preactivation away from the ReLU kink.
        let init = spec.init_params(11);
        let shift: Vec<f64> = (0..init.len()).map(|i| 0.1 * (i as f64).sin()).collect();
        let base = init
            .add_scaled(&init.with_entries(shift).unwrap(), 1.0)
            .unwrap();
        let layout = Arc::clone(base.layout());
        let xs = Tensor::column(vec![-2.0, 0.3, 1.7, 4.1]);
        let tape = Tape::new();
        let p = base.to_tape(&tape, true);
        let y = spec.forward(&p, tape.constant(xs.clone())).unwrap().sum();
        let g = grad(y, p.vars(), false).unwrap();
        let analytic = flatten_vars(&layout, &g).unwrap();
        let check = crate::autodiff::finite_diff_check(
            |theta: &[f64]| -> Result<f64> {
                let q = base.with_entries(theta.to_vec())?;
                Ok(spec.predict(&q, &xs)?.iter().sum())
            },
            analytic.entries(),
            base.entries(),
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let pred = tape.constant(Tensor::column(vec![1.0, 2.0]));
        assert_eq!(mse_loss(pred, &[1.0, 2.0]).unwrap().item(), 0.0);
        assert_eq!(mse_loss(pred, &[0.0, 0.0]).unwrap().item(), 2.5);
        let empty = tape.constant(Tensor::column(vec![]));
        assert!(matches!(mse_loss(empty, &[]), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let p = small().init_params(5).scale(1.0 / 3.0);
        let back = ParamVector::from_text(&p.to_text()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn malformed_text_is_rejected() {
        assert!(ParamVector::from_text("nope").is_err());
        let mut text = small().init_params(1).to_text();
        text.push_str("extra\n");
        assert!(ParamVector::from_text(&text).is_err());
        let truncated: String = small()
            .init_params(1)
            .to_text()
            .lines()
            .take(5)
            .collect::<Vec<_>>()
            .join("\n");
        assert!(ParamVector::from_text(&truncated).is_err());
    }

    #[test]
    fn arithmetic_checks_layouts() {
        let a = small().init_params(1);
        let b = ModelSpec::regression().init_params(1);
        assert!(matches!(a.sub(&b), Err(Error::LayoutMismatch)));
        let d = a.add_scaled(&a, -1.0).unwrap();
        assert_eq!(d.norm(), 0.0);
        assert!(d.same_layout(&a));
    }
}
