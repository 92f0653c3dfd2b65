//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Every tensor in the networks of this crate is a `rows × cols` matrix:
//! rows are time steps (or batch items) and columns are channels. A
//! [`Graph`] records each operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar node with
//! respect to every node that influenced it.
//!
//! Binary element-wise operations broadcast their *second* operand when it
//! has a single row, a single column, or is `1 × 1`.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    SumAxis(Var),
    MeanAxis(Var, Axis),
    SumAll(Var),
    SoftmaxAxis(Var, Axis),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Conv1d { x: Var, w: Var, cols: Mat, kernel: usize, dilation: usize },
    CrossEntropy { logits: Var, probs: Mat, labels: Vec<usize> },
    AngularMargin { cos: Var, labels: Vec<usize>, margin: f64, scale: f64 },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn broadcastable(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

/// Sum `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn softmax_axis(x: &Mat, axis: Axis) -> Mat {
    let mut y = x.clone();
    for mut lane in y.lanes_mut(axis) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    y
}

/// Column matrix for a same-length dilated 1-D convolution.
fn im2col(x: &Mat, kernel: usize, dilation: usize) -> Mat {
    let (t, cin) = x.dim();
    let pad = dilation * (kernel - 1) / 2;
    let mut cols = Mat::zeros((t, kernel * cin));
    for k in 0..kernel {
        let offset = (k * dilation) as isize - pad as isize;
        for row in 0..t {
            let src = row as isize + offset;
            if src < 0 || src >= t as isize {
                continue;
            }
            cols.slice_mut(s![row, k * cin..(k + 1) * cin])
                .assign(&x.row(src as usize));
        }
    }
    cols
}

fn col2im(gcols: &Mat, t: usize, cin: usize, kernel: usize, dilation: usize) -> Mat {
    let pad = dilation * (kernel - 1) / 2;
    let mut gx = Mat::zeros((t, cin));
    for k in 0..kernel {
        let offset = (k * dilation) as isize - pad as isize;
        for row in 0..t {
            let src = row as isize + offset;
            if src < 0 || src >= t as isize {
                continue;
            }
            let mut dst = gx.row_mut(src as usize);
            dst += &gcols.slice(s![row, k * cin..(k + 1) * cin]);
        }
    }
    gx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        debug_assert!(
            value.iter().all(|v| !v.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    /// Smallest distance of any input of a non-differentiable op (`relu`,
    /// `abs`, `clamp_min`) from its kink; infinite when there is none.
    /// Finite-difference checks are only meaningful where this exceeds the
    /// perturbation.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (input, at) = match node.op {
                Op::Relu(a) | Op::Abs(a) => (a, 0.0),
                Op::ClampMin(a, min) => (a, min),
                _ => continue,
            };
            for v in self.value(input).iter() {
                margin = margin.min((v - at).abs());
            }
        }
        margin
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Named trainable leaf. Requesting the same name twice returns the same node.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(broadcastable(av.dim(), bv.dim()), "add: {:?} vs {:?}", av.dim(), bv.dim());
        let out = av + bv;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(broadcastable(av.dim(), bv.dim()), "sub: {:?} vs {:?}", av.dim(), bv.dim());
        let out = av - bv;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(broadcastable(av.dim(), bv.dim()), "mul: {:?} vs {:?}", av.dim(), bv.dim());
        let out = av * bv;
        self.push(out, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: {:?} x {:?}", av.dim(), bv.dim());
        let out = av.dot(bv);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) + s;
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).mapv(|v| v.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let out = self.value(a).mapv(|v| v.max(min));
        self.push(out, Op::ClampMin(a, min))
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let out = self.value(a).sum_axis(axis).insert_axis(axis);
        self.push(out, Op::SumAxis(a))
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Var {
        let n = self.value(a).len_of(axis) as f64;
        let out = self.value(a).sum_axis(axis).insert_axis(axis) / n;
        self.push(out, Op::MeanAxis(a, axis))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// Softmax over `axis`: `Axis(0)` normalizes each column over rows (time),
    /// `Axis(1)` normalizes each row.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let out = softmax_axis(self.value(a), axis);
        self.push(out, Op::SoftmaxAxis(a, axis))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    /// Row gather: output row `i` is input row `indices[i]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Mat::zeros((indices.len(), src.ncols()));
        for (i, &j) in indices.iter().enumerate() {
            out.row_mut(i).assign(&src.row(j));
        }
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    /// Same-length dilated convolution of `x` (`T × Cin`) with `w`
    /// (`(K·Cin) × Cout`, tap-major). Zero padding of `d·(K−1)/2` on each side.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Var {
        let cin = self.value(x).ncols();
        let wrows = self.value(w).nrows();
        assert!(wrows.is_multiple_of(cin), "conv1d: weight rows {wrows} not a multiple of {cin}");
        let kernel = wrows / cin;
        assert!(kernel % 2 == 1, "conv1d: kernel must be odd");
        let cols = im2col(self.value(x), kernel, dilation);
        let out = cols.dot(self.value(w));
        self.push(out, Op::Conv1d { x, w, cols, kernel, dilation })
    }

    /// Mean softmax cross-entropy of `B × K` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len());
        let probs = softmax_axis(lv, Axis(1));
        let b = labels.len() as f64;
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[[i, y]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b;
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, probs, labels: labels.to_vec() },
        )
    }

    /// Additive angular margin on a cosine matrix: target entries become
    /// `scale·cos(θ + margin)`, all others `scale·cos θ`.
    pub fn angular_margin(&mut self, cos: Var, labels: &[usize], margin: f64, scale: f64) -> Var {
        let mut out = self.value(cos) * scale;
        let (cm, sm) = (margin.cos(), margin.sin());
        for (i, &y) in labels.iter().enumerate() {
            let c = self.value(cos)[[i, y]].clamp(-1.0 + 1e-7, 1.0 - 1e-7);
            out[[i, y]] = scale * (c * cm - (1.0 - c * c).sqrt() * sm);
        }
        self.push(out, Op::AngularMargin { cos, labels: labels.to_vec(), margin, scale })
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let sb = self.shape(*b);
                    accumulate(&mut grads[b.0], reduce_to(&g, sb));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Sub(a, b) => {
                    let sb = self.shape(*b);
                    accumulate(&mut grads[b.0], -reduce_to(&g, sb));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let gb = reduce_to(&(&g * av), bv.dim());
                    let ga = &g * bv;
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], g.dot(&bv.t()));
                    accumulate(&mut grads[b.0], av.t().dot(&g));
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], &g * *s),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g).and(y).map_collect(|&gv, &yv| gv * yv * (1.0 - yv));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g).and(y).map_collect(|&gv, &yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], &g * y),
                Op::Ln(a) => accumulate(&mut grads[a.0], &g / self.value(*a)),
                Op::Sqrt(a) => {
                    let ga = Zip::from(&g).and(y).map_collect(|&gv, &yv| gv / (2.0 * yv));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Square(a) => accumulate(&mut grads[a.0], &g * self.value(*a) * 2.0),
                Op::Abs(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gv, &x| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Powf(a, p) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gv, &x| gv * p * x.powf(p - 1.0));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ClampMin(a, min) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gv, &x| if x >= *min { gv } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAxis(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.shape(*a);
                    let n = self.value(*a).len_of(*axis) as f64;
                    let ga = g.broadcast(shape).unwrap().to_owned() / n;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxAxis(a, axis) => {
                    let gy = &g * y;
                    let dot = gy.sum_axis(*axis).insert_axis(*axis);
                    let ga = y * &(&g - &dot);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        accumulate(&mut grads[p.0], g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        accumulate(&mut grads[p.0], g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::GatherRows(a, indices) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (i, &j) in indices.iter().enumerate() {
                        let mut row = ga.row_mut(j);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Conv1d { x, w, cols, kernel, dilation } => {
                    let wv = self.value(*w);
                    accumulate(&mut grads[w.0], cols.t().dot(&g));
                    let gcols = g.dot(&wv.t());
                    let (t, cin) = self.shape(*x);
                    accumulate(&mut grads[x.0], col2im(&gcols, t, cin, *kernel, *dilation));
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let b = labels.len() as f64;
                    let mut ga = probs.clone();
                    for (i, &lab) in labels.iter().enumerate() {
                        ga[[i, lab]] -= 1.0;
                    }
                    ga *= g[[0, 0]] / b;
                    accumulate(&mut grads[logits.0], ga);
                }
                Op::AngularMargin { cos, labels, margin, scale } => {
                    let mut ga = &g * *scale;
                    let (cm, sm) = (margin.cos(), margin.sin());
                    for (i, &lab) in labels.iter().enumerate() {
                        let c = self.value(*cos)[[i, lab]];
                        let cc = c.clamp(-1.0 + 1e-7, 1.0 - 1e-7);
                        let d = if c == cc {
                            *scale * (cm + cc / (1.0 - cc * cc).sqrt() * sm)
                        } else {
                            0.0
                        };
                        ga[[i, lab]] = g[[i, lab]] * d;
                    }
                    accumulate(&mut grads[cos.0], ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every named parameter, zero-filled for parameters that did
    /// not influence the loss.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric<F: Fn(&Mat) -> f64>(f: F, x: &Mat) -> Mat {
        let eps = 1e-6;
        let mut out = Mat::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut p = x.clone();
                p[[i, j]] += eps;
                let mut m = x.clone();
                m[[i, j]] -= eps;
                out[[i, j]] = (f(&p) - f(&m)) / (2.0 * eps);
            }
        }
        out
    }

    fn check<F: Fn(&mut Graph, Var) -> Var>(build: F, x: Mat) {
        let f = |m: &Mat| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).unwrap();
        let num = numeric(f, &x);
        for (a, n) in analytic.iter().zip(num.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn kink_margin_tracks_nearest_non_differentiable_input() {
        let mut g = Graph::new();
        assert!(g.kink_margin().is_infinite());
        let x = g.constant(array![[0.3, -0.05], [2.0, 1.0]]);
        g.relu(x);
        assert!((g.kink_margin() - 0.05).abs() < 1e-12);
        g.clamp_min(x, 0.99);
        assert!((g.kink_margin() - 0.01).abs() < 1e-12);
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5], [-0.8, 0.9, 0.2], [0.6, -0.3, 1.4]]
    }

    #[test]
    fn softmax_columns_gradient() {
        check(
            |g, x| {
                let w = g.constant(sample().mapv(|v| v * 0.37 + 0.1));
                let s = g.softmax(x, Axis(0));
                let p = g.mul(s, w);
                g.sum_all(p)
            },
            sample(),
        );
    }

    #[test]
    fn conv1d_gradient_wrt_input() {
        let w = Mat::from_shape_fn((9, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.conv1d(x, wv, 2);
                let y = g.tanh(y);
                g.sum_all(y)
            },
            sample(),
        );
    }

    #[test]
    fn broadcast_ops_gradient() {
        check(
            |g, x| {
                let m = g.mean_axis(x, Axis(0));
                let c = g.sub(x, m);
                let r = g.mean_axis(x, Axis(1));
                let d = g.mul(c, r);
                let sq = g.square(d);
                let e = g.exp(sq);
                g.sum_all(e)
            },
            sample() * 0.5,
        );
    }

    #[test]
    fn cross_entropy_matches_definition() {
        let mut g = Graph::new();
        let logits = g.constant(array![[1.0, 2.0, 0.5], [0.1, 0.1, 0.1]]);
        let loss = g.cross_entropy(logits, &[1, 2]);
        let row0 = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln() - 2.0;
        let row1 = 3f64.ln();
        assert!((g.scalar(loss) - (row0 + row1) / 2.0).abs() < 1e-12);
        check(
            |g, x| {
                let l = g.slice_rows(x, 0, 2);
                g.cross_entropy(l, &[1, 0])
            },
            sample(),
        );
    }

    #[test]
    fn angular_margin_gradient() {
        check(
            |g, x| {
                let c = g.tanh(x);
                let m = g.angular_margin(c, &[0, 2, 1, 1], 0.2, 5.0);
                g.cross_entropy(m, &[0, 2, 1, 1])
            },
            sample() * 0.4,
        );
    }

    #[test]
    fn gather_and_concat_gradient() {
        check(
            |g, x| {
                let a = g.gather_rows(x, &[0, 0, 3, 1]);
                let b = g.slice_cols(a, 1, 3);
                let c = g.concat_cols(&[a, b]);
                let d = g.concat_rows(&[c, c]);
                let t = g.transpose(d);
                let q = g.powf(t, 3.0);
                g.sum_all(q)
            },
            sample(),
        );
    }

    #[test]
    fn parameters_are_deduplicated_by_name() {
        let mut g = Graph::new();
        let w = array![[2.0]];
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(g.param_grads(&grads)["w"][[0, 0]], 4.0);
    }
}
