use super::{ParamStore, Real, Tensor, TensorError};

/// Handle to a value in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueRef(usize);

enum Op<F> {
    Input,
    Param { id: usize },
    Conv1d { x: ValueRef, w: ValueRef, b: ValueRef, kernel: usize, dilation: usize },
    Linear { x: ValueRef, w: ValueRef, b: ValueRef },
    Relu { x: ValueRef },
    MaxPool1d { x: ValueRef, argmax: Vec<usize> },
    ConcatCols { a: ValueRef, b: ValueRef },
    ConcatRows { parts: Vec<ValueRef> },
    MeanOf { a: ValueRef, b: ValueRef },
    Add { a: ValueRef, b: ValueRef },
    Scale { x: ValueRef, factor: F },
    GatherRows { x: ValueRef, idx: Vec<usize> },
    SliceCols { x: ValueRef, start: usize, len: usize },
    Reshape { x: ValueRef },
    SoiPool { x: ValueRef, argmax: Vec<usize> },
    SoftmaxXent { logits: ValueRef, labels: Vec<usize>, probs: Tensor<F> },
    SigmoidBce { logits: ValueRef, targets: Vec<F> },
    SmoothL1 { pred: ValueRef, target: Tensor<F>, normalizer: F },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
}

/// Define-by-run computation tape. Forward values are computed eagerly at
/// node creation; `backward` replays the tape in reverse. Single-threaded,
/// so the reduction order (and hence the floating-point result) is fixed.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> ValueRef {
        self.nodes.push(Node { op, value });
        ValueRef(self.nodes.len() - 1)
    }

    pub fn value(&self, r: ValueRef) -> &Tensor<F> {
        &self.nodes[r.0].value
    }

    /// Gradient of the last backward pass with respect to `r`, if any flowed.
    pub fn grad(&self, r: ValueRef) -> Option<&Tensor<F>> {
        self.grads.get(r.0).and_then(|g| g.as_ref())
    }

    pub fn input(&mut self, t: Tensor<F>) -> ValueRef {
        self.push(Op::Input, t)
    }

    /// Leaf bound to a store parameter; backward accumulates into the store.
    pub fn param(&mut self, store: &ParamStore<F>, id: usize) -> ValueRef {
        self.push(Op::Param { id }, store.value(id).clone())
    }

    pub fn param_named(&mut self, store: &ParamStore<F>, name: &str) -> Result<ValueRef, TensorError> {
        Ok(self.param(store, store.id_of(name)?))
    }

    /// Zero-padded same-length dilated convolution over a T×D_in grid.
    /// Weights are (K·D_in)×D_out with row index k·D_in + d; taps land at
    /// t + (k − (K−1)/2)·dilation and out-of-range taps read as zero.
    pub fn conv1d(
        &mut self,
        x: ValueRef,
        w: ValueRef,
        b: ValueRef,
        kernel: usize,
        dilation: usize,
    ) -> Result<ValueRef, TensorError> {
        assert!(kernel % 2 == 1, "conv1d kernel must be odd");
        assert!(dilation >= 1, "dilation must be >= 1");
        let (xt, wt, bt) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let d_in = xt.cols;
        if wt.rows != kernel * d_in {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x{}", kernel * d_in, wt.cols),
                got: format!("{}x{}", wt.rows, wt.cols),
                context: "conv1d weights".into(),
            });
        }
        let d_out = wt.cols;
        if bt.rows != 1 || bt.cols != d_out {
            return Err(TensorError::ShapeMismatch {
                expected: format!("1x{d_out}"),
                got: format!("{}x{}", bt.rows, bt.cols),
                context: "conv1d bias".into(),
            });
        }
        let t_len = xt.rows;
        let half = (kernel as isize - 1) / 2;
        let mut out = Tensor::zeros(t_len, d_out);
        for t in 0..t_len {
            let o = &mut out.data[t * d_out..(t + 1) * d_out];
            o.copy_from_slice(&bt.data);
            for k in 0..kernel {
                let tap = t as isize + (k as isize - half) * dilation as isize;
                if tap < 0 || tap >= t_len as isize {
                    continue;
                }
                let xrow = xt.row(tap as usize);
                for d in 0..d_in {
                    let xv = xrow[d];
                    if xv == F::zero() {
                        continue;
                    }
                    let wrow = wt.row(k * d_in + d);
                    for (ov, wv) in o.iter_mut().zip(wrow.iter()) {
                        *ov = *ov + xv * *wv;
                    }
                }
            }
        }
        Ok(self.push(Op::Conv1d { x, w, b, kernel, dilation }, out))
    }

    /// Row-wise affine map: out = x·w + b, with x R×D_in, w D_in×D_out.
    pub fn linear(&mut self, x: ValueRef, w: ValueRef, b: ValueRef) -> Result<ValueRef, TensorError> {
        let (xt, wt, bt) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if wt.rows != xt.cols {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x*", xt.cols),
                got: format!("{}x{}", wt.rows, wt.cols),
                context: "linear weights".into(),
            });
        }
        let d_out = wt.cols;
        if bt.rows != 1 || bt.cols != d_out {
            return Err(TensorError::ShapeMismatch {
                expected: format!("1x{d_out}"),
                got: format!("{}x{}", bt.rows, bt.cols),
                context: "linear bias".into(),
            });
        }
        let mut out = Tensor::zeros(xt.rows, d_out);
        for r in 0..xt.rows {
            let o = &mut out.data[r * d_out..(r + 1) * d_out];
            o.copy_from_slice(&bt.data);
            let xrow = xt.row(r);
            for d in 0..xt.cols {
                let xv = xrow[d];
                if xv == F::zero() {
                    continue;
                }
                let wrow = wt.row(d);
                for (ov, wv) in o.iter_mut().zip(wrow.iter()) {
                    *ov = *ov + xv * *wv;
                }
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    pub fn relu(&mut self, x: ValueRef) -> ValueRef {
        let xt = &self.nodes[x.0].value;
        let mut out = xt.clone();
        for v in out.data.iter_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        self.push(Op::Relu { x }, out)
    }

    /// Stride-1 same-length temporal max pooling. The window at cell t covers
    /// taps t−⌊k/2⌋ … t+⌈k/2⌉−1; out-of-range cells are ignored, never padded.
    pub fn maxpool1d(&mut self, x: ValueRef, kernel: usize) -> ValueRef {
        assert!(kernel >= 1, "maxpool kernel must be >= 1");
        let xt = &self.nodes[x.0].value;
        let (t_len, d) = (xt.rows, xt.cols);
        let mut out = Tensor::zeros(t_len, d);
        let mut argmax = vec![0usize; t_len * d];
        let lo_off = (kernel / 2) as isize;
        let hi_off = kernel.div_ceil(2) as isize;
        for t in 0..t_len {
            let start = (t as isize - lo_off).max(0) as usize;
            let end = ((t as isize + hi_off).min(t_len as isize)) as usize;
            for c in 0..d {
                let mut best = xt.at(start, c);
                let mut best_row = start;
                for r in start + 1..end {
                    let v = xt.at(r, c);
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                out.data[t * d + c] = best;
                argmax[t * d + c] = best_row;
            }
        }
        self.push(Op::MaxPool1d { x, argmax }, out)
    }

    pub fn concat_cols(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, TensorError> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if at.rows != bt.rows {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x*", at.rows),
                got: format!("{}x{}", bt.rows, bt.cols),
                context: "concat_cols".into(),
            });
        }
        let cols = at.cols + bt.cols;
        let mut out = Tensor::zeros(at.rows, cols);
        for r in 0..at.rows {
            out.data[r * cols..r * cols + at.cols].copy_from_slice(at.row(r));
            out.data[r * cols + at.cols..(r + 1) * cols].copy_from_slice(bt.row(r));
        }
        Ok(self.push(Op::ConcatCols { a, b }, out))
    }

    pub fn concat_rows(&mut self, parts: &[ValueRef]) -> Result<ValueRef, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.nodes[parts[0].0].value.cols;
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("*x{cols}"),
                    got: format!("{}x{}", t.rows, t.cols),
                    context: "concat_rows".into(),
                });
            }
            rows += t.rows;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, Tensor::from_vec(data, rows, cols)))
    }

    /// Elementwise (a + b) / 2.
    pub fn mean_of(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, TensorError> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !at.same_shape(bt) {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x{}", at.rows, at.cols),
                got: format!("{}x{}", bt.rows, bt.cols),
                context: "mean_of".into(),
            });
        }
        let half = F::from_f64(0.5);
        let mut out = at.clone();
        for (o, v) in out.data.iter_mut().zip(bt.data.iter()) {
            *o = (*o + *v) * half;
        }
        Ok(self.push(Op::MeanOf { a, b }, out))
    }

    pub fn add(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef, TensorError> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !at.same_shape(bt) {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x{}", at.rows, at.cols),
                got: format!("{}x{}", bt.rows, bt.cols),
                context: "add".into(),
            });
        }
        let mut out = at.clone();
        for (o, v) in out.data.iter_mut().zip(bt.data.iter()) {
            *o = *o + *v;
        }
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn scale(&mut self, x: ValueRef, factor: f64) -> ValueRef {
        let f = F::from_f64(factor);
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data.iter_mut() {
            *v = *v * f;
        }
        self.push(Op::Scale { x, factor: f }, out)
    }

    pub fn gather_rows(&mut self, x: ValueRef, idx: &[usize]) -> ValueRef {
        let xt = &self.nodes[x.0].value;
        let cols = xt.cols;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            data.extend_from_slice(xt.row(r));
        }
        let out = Tensor::from_vec(data, idx.len(), cols);
        self.push(Op::GatherRows { x, idx: idx.to_vec() }, out)
    }

    pub fn slice_cols(&mut self, x: ValueRef, start: usize, len: usize) -> ValueRef {
        let xt = &self.nodes[x.0].value;
        assert!(start + len <= xt.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(xt.rows, len);
        for r in 0..xt.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&xt.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, out)
    }

    /// Free reinterpretation of the storage as a new shape.
    pub fn reshape(&mut self, x: ValueRef, rows: usize, cols: usize) -> ValueRef {
        let xt = &self.nodes[x.0].value;
        assert_eq!(xt.rows * xt.cols, rows * cols, "reshape element count mismatch");
        let out = Tensor::from_vec(xt.data.clone(), rows, cols);
        self.push(Op::Reshape { x }, out)
    }

    /// Per-bin channelwise max over precomputed row windows (start..end,
    /// half-open). Gradient routes to the argmax cell, ties to the lowest row.
    pub fn soi_pool(&mut self, x: ValueRef, windows: &[(usize, usize)]) -> ValueRef {
        let xt = &self.nodes[x.0].value;
        let d = xt.cols;
        let bins = windows.len();
        let mut out = Tensor::zeros(bins, d);
        let mut argmax = vec![0usize; bins * d];
        for (j, &(start, end)) in windows.iter().enumerate() {
            assert!(start < end && end <= xt.rows, "soi_pool window out of range");
            for c in 0..d {
                let mut best = xt.at(start, c);
                let mut best_row = start;
                for r in start + 1..end {
                    let v = xt.at(r, c);
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                out.data[j * d + c] = best;
                argmax[j * d + c] = best_row;
            }
        }
        self.push(Op::SoiPool { x, argmax }, out)
    }

    /// Mean over rows of −log softmax(logits)[label], log-sum-exp stabilized.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueRef,
        labels: &[usize],
    ) -> Result<ValueRef, TensorError> {
        let lt = &self.nodes[logits.0].value;
        if labels.len() != lt.rows {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{} labels", lt.rows),
                got: format!("{} labels", labels.len()),
                context: "softmax_cross_entropy".into(),
            });
        }
        let classes = lt.cols;
        for &l in labels {
            if l >= classes {
                return Err(TensorError::LabelOutOfRange { label: l, classes });
            }
        }
        let mut probs = Tensor::zeros(lt.rows, classes);
        let mut loss = F::zero();
        for r in 0..lt.rows {
            let row = lt.row(r);
            let mx = row.iter().cloned().fold(row[0], F::max);
            let mut denom = F::zero();
            for c in 0..classes {
                let e = (row[c] - mx).exp();
                probs.data[r * classes + c] = e;
                denom = denom + e;
            }
            for c in 0..classes {
                probs.data[r * classes + c] = probs.data[r * classes + c] / denom;
            }
            loss = loss - (row[labels[r]] - mx - denom.ln());
        }
        let n = F::from_f64(lt.rows as f64);
        let value = Tensor::scalar(loss / n);
        Ok(self.push(Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }, value))
    }

    /// Mean binary cross-entropy against sigmoid(logits); logits are N×1.
    pub fn sigmoid_bce(&mut self, logits: ValueRef, targets: &[F]) -> Result<ValueRef, TensorError> {
        let lt = &self.nodes[logits.0].value;
        if lt.cols != 1 || targets.len() != lt.rows {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x1 logits / {} targets", targets.len(), lt.rows),
                got: format!("{}x{}", lt.rows, lt.cols),
                context: "sigmoid_bce".into(),
            });
        }
        let mut loss = F::zero();
        for (z, t) in lt.data.iter().zip(targets.iter()) {
            // max(z,0) − z·t + ln(1 + e^{−|z|})
            loss = loss + z.max(F::zero()) - *z * *t + (F::one() + (-z.abs()).exp()).ln();
        }
        let n = F::from_f64(lt.rows as f64);
        let value = Tensor::scalar(loss / n);
        Ok(self.push(Op::SigmoidBce { logits, targets: targets.to_vec() }, value))
    }

    /// Smooth L1: Σ f(pred − target) / normalizer with f(x) = 0.5x² for
    /// |x| < 1 and |x| − 0.5 otherwise.
    pub fn smooth_l1(
        &mut self,
        pred: ValueRef,
        target: &Tensor<F>,
        normalizer: f64,
    ) -> Result<ValueRef, TensorError> {
        let pt = &self.nodes[pred.0].value;
        if !pt.same_shape(target) {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{}x{}", target.rows, target.cols),
                got: format!("{}x{}", pt.rows, pt.cols),
                context: "smooth_l1".into(),
            });
        }
        let half = F::from_f64(0.5);
        let mut loss = F::zero();
        for (p, t) in pt.data.iter().zip(target.data.iter()) {
            let d = *p - *t;
            let a = d.abs();
            loss = loss + if a < F::one() { half * d * d } else { a - half };
        }
        let norm = F::from_f64(normalizer);
        let value = Tensor::scalar(loss / norm);
        Ok(self.push(Op::SmoothL1 { pred, target: target.clone(), normalizer: norm }, value))
    }

    /// Reverse pass from a scalar loss node. Parameter gradients accumulate
    /// into `store`; gradients of every node stay readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: ValueRef, store: &mut ParamStore<F>) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::BackwardBeforeForward);
        }
        let loss_t = &self.nodes[loss.0].value;
        assert_eq!(loss_t.data.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<F>,
        grads: &mut Vec<Option<Tensor<F>>>,
        store: &mut ParamStore<F>,
    ) {
        let half = F::from_f64(0.5);
        let ensure = |grads: &mut Vec<Option<Tensor<F>>>, r: ValueRef, rows: usize, cols: usize| {
            if grads[r.0].is_none() {
                grads[r.0] = Some(Tensor::zeros(rows, cols));
            }
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param { id } => store.accumulate_grad(*id, g),
            Op::Conv1d { x, w, b, kernel, dilation } => {
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[w.0].value;
                let (t_len, d_in, d_out) = (xt.rows, xt.cols, wt.cols);
                ensure(grads, *x, t_len, d_in);
                ensure(grads, *w, wt.rows, wt.cols);
                ensure(grads, *b, 1, d_out);
                let half_k = (*kernel as isize - 1) / 2;
                // split the grads vec to borrow x/w/b slots simultaneously
                let mut gx = grads[x.0].take().unwrap();
                let mut gw = grads[w.0].take().unwrap();
                let mut gb = grads[b.0].take().unwrap();
                for t in 0..t_len {
                    let go = g.row(t);
                    for (gbv, gov) in gb.data.iter_mut().zip(go.iter()) {
                        *gbv = *gbv + *gov;
                    }
                    for k in 0..*kernel {
                        let tap = t as isize + (k as isize - half_k) * *dilation as isize;
                        if tap < 0 || tap >= t_len as isize {
                            continue;
                        }
                        let tap = tap as usize;
                        let xrow = xt.row(tap);
                        for d in 0..d_in {
                            let wrow = wt.row(k * d_in + d);
                            let mut acc = F::zero();
                            for (gov, wv) in go.iter().zip(wrow.iter()) {
                                acc = acc + *gov * *wv;
                            }
                            gx.data[tap * d_in + d] = gx.data[tap * d_in + d] + acc;
                            let xv = xrow[d];
                            if xv != F::zero() {
                                let gwrow = &mut gw.data[(k * d_in + d) * d_out..(k * d_in + d + 1) * d_out];
                                for (gwv, gov) in gwrow.iter_mut().zip(go.iter()) {
                                    *gwv = *gwv + xv * *gov;
                                }
                            }
                        }
                    }
                }
                grads[x.0] = Some(gx);
                grads[w.0] = Some(gw);
                grads[b.0] = Some(gb);
            }
            Op::Linear { x, w, b } => {
                let xt = &self.nodes[x.0].value;
                let wt = &self.nodes[w.0].value;
                let (rows, d_in, d_out) = (xt.rows, xt.cols, wt.cols);
                ensure(grads, *x, rows, d_in);
                ensure(grads, *w, wt.rows, wt.cols);
                ensure(grads, *b, 1, d_out);
                let mut gx = grads[x.0].take().unwrap();
                let mut gw = grads[w.0].take().unwrap();
                let mut gb = grads[b.0].take().unwrap();
                for r in 0..rows {
                    let go = g.row(r);
                    let xrow = xt.row(r);
                    for (gbv, gov) in gb.data.iter_mut().zip(go.iter()) {
                        *gbv = *gbv + *gov;
                    }
                    for d in 0..d_in {
                        let wrow = wt.row(d);
                        let mut acc = F::zero();
                        for (gov, wv) in go.iter().zip(wrow.iter()) {
                            acc = acc + *gov * *wv;
                        }
                        gx.data[r * d_in + d] = gx.data[r * d_in + d] + acc;
                        let xv = xrow[d];
                        if xv != F::zero() {
                            let gwrow = &mut gw.data[d * d_out..(d + 1) * d_out];
                            for (gwv, gov) in gwrow.iter_mut().zip(go.iter()) {
                                *gwv = *gwv + xv * *gov;
                            }
                        }
                    }
                }
                grads[x.0] = Some(gx);
                grads[w.0] = Some(gw);
                grads[b.0] = Some(gb);
            }
            Op::Relu { x } => {
                let xt = &self.nodes[x.0].value;
                ensure(grads, *x, xt.rows, xt.cols);
                let gx = grads[x.0].as_mut().unwrap();
                for j in 0..xt.data.len() {
                    if xt.data[j] > F::zero() {
                        gx.data[j] = gx.data[j] + g.data[j];
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let xt = &self.nodes[x.0].value;
                let d = xt.cols;
                ensure(grads, *x, xt.rows, d);
                let gx = grads[x.0].as_mut().unwrap();
                for t in 0..g.rows {
                    for c in 0..d {
                        let src = argmax[t * d + c];
                        gx.data[src * d + c] = gx.data[src * d + c] + g.data[t * d + c];
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let at = &self.nodes[a.0].value;
                let bt = &self.nodes[b.0].value;
                ensure(grads, *a, at.rows, at.cols);
                ensure(grads, *b, bt.rows, bt.cols);
                let cols = at.cols + bt.cols;
                {
                    let ga = grads[a.0].as_mut().unwrap();
                    for r in 0..at.rows {
                        for c in 0..at.cols {
                            ga.data[r * at.cols + c] = ga.data[r * at.cols + c] + g.data[r * cols + c];
                        }
                    }
                }
                let gb = grads[b.0].as_mut().unwrap();
                for r in 0..bt.rows {
                    for c in 0..bt.cols {
                        gb.data[r * bt.cols + c] =
                            gb.data[r * bt.cols + c] + g.data[r * cols + at.cols + c];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let pt = &self.nodes[p.0].value;
                    ensure(grads, *p, pt.rows, pt.cols);
                    let gp = grads[p.0].as_mut().unwrap();
                    let n = pt.rows * pt.cols;
                    for j in 0..n {
                        gp.data[j] = gp.data[j] + g.data[offset + j];
                    }
                    offset += n;
                }
            }
            Op::MeanOf { a, b } => {
                for r in [*a, *b] {
                    let rt = &self.nodes[r.0].value;
                    ensure(grads, r, rt.rows, rt.cols);
                    let gr = grads[r.0].as_mut().unwrap();
                    for j in 0..g.data.len() {
                        gr.data[j] = gr.data[j] + half * g.data[j];
                    }
                }
            }
            Op::Add { a, b } => {
                for r in [*a, *b] {
                    let rt = &self.nodes[r.0].value;
                    ensure(grads, r, rt.rows, rt.cols);
                    let gr = grads[r.0].as_mut().unwrap();
                    for j in 0..g.data.len() {
                        gr.data[j] = gr.data[j] + g.data[j];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let xt = &self.nodes[x.0].value;
                ensure(grads, *x, xt.rows, xt.cols);
                let gx = grads[x.0].as_mut().unwrap();
                for j in 0..g.data.len() {
                    gx.data[j] = gx.data[j] + *factor * g.data[j];
                }
            }
            Op::GatherRows { x, idx } => {
                let xt = &self.nodes[x.0].value;
                let cols = xt.cols;
                ensure(grads, *x, xt.rows, cols);
                let gx = grads[x.0].as_mut().unwrap();
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx.data[src_r * cols + c] = gx.data[src_r * cols + c] + g.data[out_r * cols + c];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let xt = &self.nodes[x.0].value;
                ensure(grads, *x, xt.rows, xt.cols);
                let gx = grads[x.0].as_mut().unwrap();
                for r in 0..g.rows {
                    for c in 0..*len {
                        gx.data[r * xt.cols + start + c] =
                            gx.data[r * xt.cols + start + c] + g.data[r * len + c];
                    }
                }
            }
            Op::Reshape { x } => {
                let xt = &self.nodes[x.0].value;
                ensure(grads, *x, xt.rows, xt.cols);
                let gx = grads[x.0].as_mut().unwrap();
                for j in 0..g.data.len() {
                    gx.data[j] = gx.data[j] + g.data[j];
                }
            }
            Op::SoiPool { x, argmax } => {
                let xt = &self.nodes[x.0].value;
                let d = xt.cols;
                ensure(grads, *x, xt.rows, d);
                let gx = grads[x.0].as_mut().unwrap();
                for j in 0..g.rows {
                    for c in 0..d {
                        let src = argmax[j * d + c];
                        gx.data[src * d + c] = gx.data[src * d + c] + g.data[j * d + c];
                    }
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let lt = &self.nodes[logits.0].value;
                ensure(grads, *logits, lt.rows, lt.cols);
                let gl = grads[logits.0].as_mut().unwrap();
                let scale = g.item() / F::from_f64(lt.rows as f64);
                for r in 0..lt.rows {
                    for c in 0..lt.cols {
                        let mut d = probs.data[r * lt.cols + c];
                        if c == labels[r] {
                            d = d - F::one();
                        }
                        gl.data[r * lt.cols + c] = gl.data[r * lt.cols + c] + scale * d;
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let lt = &self.nodes[logits.0].value;
                ensure(grads, *logits, lt.rows, 1);
                let gl = grads[logits.0].as_mut().unwrap();
                let scale = g.item() / F::from_f64(lt.rows as f64);
                for r in 0..lt.rows {
                    let z = lt.data[r];
                    let sig = F::one() / (F::one() + (-z).exp());
                    gl.data[r] = gl.data[r] + scale * (sig - targets[r]);
                }
            }
            Op::SmoothL1 { pred, target, normalizer } => {
                let pt = &self.nodes[pred.0].value;
                ensure(grads, *pred, pt.rows, pt.cols);
                let gp = grads[pred.0].as_mut().unwrap();
                let scale = g.item() / *normalizer;
                for j in 0..pt.data.len() {
                    let d = pt.data[j] - target.data[j];
                    let df = if d.abs() < F::one() {
                        d
                    } else if d > F::zero() {
                        F::one()
                    } else {
                        -F::one()
                    };
                    gp.data[j] = gp.data[j] + scale * df;
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row softmax on plain f64 values (inference-side scoring).
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}
