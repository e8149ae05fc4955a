use super::{gemm, NnError, ParamSet, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel 2-D convolution over `[N, C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, NnError> {
        if kernel == 0 || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(NnError::Shape(format!(
                "convolution kernel {kernel} stride {stride} pad {pad} does not fit {height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let area = g.out_area();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * area..][..area];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ki as isize - p;
                    let out = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - p;
                        *o = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let area = g.out_area();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * area..][..area];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in row[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn s2d_index(shape: &[usize], block: usize, n: usize, c: usize, y: usize, x: usize) -> usize {
    // input coordinates to output offset for the [N, C*b*b, H/b, W/b] layout
    let (ch, h, w) = (shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / block, w / block);
    let oc = c * block * block + (y % block) * block + x % block;
    ((n * ch * block * block + oc) * oh + y / block) * ow + x / block
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul { a: Var, b: Var, tb: bool },
    AddRowBias { x: Var, b: Var },
    AddScalar { x: Var, s: Var },
    MulScalar { x: Var, s: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    SpaceToDepth { x: Var, block: usize },
    SpatialMean(Var),
    ChannelScale { x: Var, g: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { a: Var, b: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    RowMask { x: Var, keep: Vec<bool> },
    Reshape(Var),
    WeightedSum { x: Var, w: Vec<T> },
    ScalarFn { inputs: Vec<Var>, local: Vec<Tensor<T>> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Parameters are read in place from the borrowed [`ParamSet`]; every other
/// value is owned by the tape. [`Tape::backward`] consumes the recording, so
/// a second call is a contract violation.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

fn shape_err<V>(msg: String) -> Result<V, NnError> {
    Err(NnError::Shape(msg))
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.params.tensor(*i),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter with index `i`, recorded at most once per tape.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(i),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    /// `a·b` for `a: [m,k]`, with `b: [k,n]`, or `b: [n,k]` used transposed when `tb`.
    pub fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul needs matrices, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err(format!("matmul inner dimensions differ: {sa:?} and {sb:?} (tb={tb})"));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            tb,
            T::zero(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a, b, tb }, &[a, b]))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return shape_err(format!("row bias {sb:?} does not match {sx:?}"));
        }
        let n = sx[1];
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias { x, b }, &[x, b]))
    }

    fn scalar_of(&self, s: Var) -> Result<T, NnError> {
        let t = self.value(s);
        if t.len() != 1 {
            return shape_err(format!("expected a scalar, got {:?}", t.shape()));
        }
        Ok(t.data()[0])
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let sv = self.scalar_of(s)?;
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|o| *o += sv);
        Ok(self.push(out, Op::AddScalar { x, s }, &[x, s]))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let sv = self.scalar_of(s)?;
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|o| *o *= sv);
        Ok(self.push(out, Op::MulScalar { x, s }, &[x, s]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|o| *o = f(*o));
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    /// Convolution of `x: [N, C, H, W]` with `w: [O, C·k·k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var, NnError> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[1..] != [geom.channels, geom.height, geom.width] {
            return shape_err(format!("conv input {sx:?} does not match {geom:?}"));
        }
        if self.shape(w) != [geom.out_channels, geom.patch()] {
            return shape_err(format!("conv weight {:?} does not match {geom:?}", self.shape(w)));
        }
        let n = sx[0];
        let (in_len, out_len) = (
            geom.channels * geom.height * geom.width,
            geom.out_channels * geom.out_area(),
        );
        let mut out = Tensor::zeros(&[n, geom.out_channels, geom.out_h, geom.out_w]);
        let mut cols = vec![T::zero(); geom.patch() * geom.out_area()];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for (img, o) in xv.chunks(in_len).zip(out.data_mut().chunks_mut(out_len)) {
            im2col(img, &geom, &mut cols);
            gemm(
                geom.out_channels,
                geom.patch(),
                geom.out_area(),
                wv,
                false,
                &cols,
                false,
                T::zero(),
                o,
            );
        }
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Moves each `block×block` spatial patch into channels.
    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var, NnError> {
        let out = space_to_depth(self.value(x), block)?;
        Ok(self.push(out, Op::SpaceToDepth { x, block }, &[x]))
    }

    /// `[N, C, H, W]` to the per-channel mean `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x);
        if s.len() != 4 {
            return shape_err(format!("spatial mean needs [N,C,H,W], got {s:?}"));
        }
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::of(area as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(area)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::SpatialMean(x), &[x]))
    }

    /// `x: [N, C, H, W]` scaled per channel by `g: [N, C]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var, NnError> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() != 4 || sg != [sx[0], sx[1]] {
            return shape_err(format!("channel gate {sg:?} does not match {sx:?}"));
        }
        let area = sx[2] * sx[3];
        let mut out = self.value(x).clone();
        for (p, &gv) in out.data_mut().chunks_mut(area).zip(self.value(g).data()) {
            p.iter_mut().for_each(|o| *o *= gv);
        }
        Ok(self.push(out, Op::ChannelScale { x, g }, &[x, g]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return shape_err(format!("column slice {start}+{len} outside {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::from_vec(&[m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return shape_err(format!("cannot concatenate columns of {sa:?} and {sb:?}"));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&av[r * p..(r + 1) * p]);
            data.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let out = Tensor::from_vec(&[m, p + q], data)?;
        Ok(self.push(out, Op::ConcatCols { a, b }, &[a, b]))
    }

    /// Rows `start..start + count` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var, NnError> {
        let s = self.shape(x);
        if s.is_empty() || start + count > s[0] {
            return shape_err(format!("row slice {start}+{count} outside {s:?}"));
        }
        let out = self.value(x).rows(start, count);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let Some(&first) = parts.first() else {
            return shape_err("nothing to concatenate".into());
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return shape_err(format!("cannot stack {s:?} under rows of {tail:?}"));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Zeroes the rows whose `keep` flag is false.
    pub fn row_mask(&mut self, x: Var, keep: &[bool]) -> Result<Var, NnError> {
        let s = self.shape(x);
        if s.is_empty() || s[0] != keep.len() {
            return shape_err(format!("mask of {} rows for {s:?}", keep.len()));
        }
        let mut out = self.value(x).clone();
        let row = out.len() / keep.len().max(1);
        for (r, &k) in out.data_mut().chunks_mut(row.max(1)).zip(keep) {
            if !k {
                r.fill(T::zero());
            }
        }
        Ok(self.push(out, Op::RowMask { x, keep: keep.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `Σ w ⊙ x` as a one-element tensor.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var, NnError> {
        if w.len() != self.value(x).len() {
            return shape_err(format!("{} weights for {:?}", w.len(), self.shape(x)));
        }
        let v = self.value(x).data().iter().zip(w).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum { x, w: w.to_vec() }, &[x]))
    }

    /// A scalar computed outside the tape, with its gradient with respect
    /// to each input supplied by the caller.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: T, local: Vec<Tensor<T>>) -> Result<Var, NnError> {
        if inputs.len() != local.len() {
            return shape_err("one local gradient per input is required".into());
        }
        for (&i, l) in inputs.iter().zip(&local) {
            if self.shape(i) != l.shape() {
                return shape_err(format!("local gradient {:?} for input {:?}", l.shape(), self.shape(i)));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                local,
            },
            inputs,
        ))
    }

    /// Reverse sweep from the one-element `loss`. Returns one gradient per
    /// parameter (zeros for parameters the loss does not depend on).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor<T>>, NnError> {
        if self.consumed {
            return Err(NnError::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!("loss must be a scalar, got {:?}", self.shape(loss)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok((0..self.params.len())
            .map(|p| match self.param_vars[p].and_then(|v| grads[v.0].take()) {
                Some(g) => g,
                None => Tensor::zeros(self.params.tensor(p).shape()),
            })
            .collect())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
            f(slot.data_mut());
        };
        let y = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = gd.len() / m.max(1);
                acc(*a, &mut |da| gemm(m, n, k, gd, false, bv.data(), !tb, T::one(), da));
                acc(*b, &mut |db| {
                    if *tb {
                        gemm(n, m, k, gd, true, av.data(), false, T::one(), db)
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, T::one(), db)
                    }
                });
            }
            Op::AddRowBias { x, b } => {
                acc(*x, &mut |dx| add_into(dx, gd));
                let n = self.value(*b).len();
                acc(*b, &mut |db| {
                    for row in gd.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::AddScalar { x, s } => {
                acc(*x, &mut |dx| add_into(dx, gd));
                acc(*s, &mut |ds| ds[0] += gd.iter().copied().sum::<T>());
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                acc(*x, &mut |dx| dx.iter_mut().zip(gd).for_each(|(d, &gv)| *d += gv * sv));
                let xv = self.value(*x).data();
                acc(*s, &mut |ds| {
                    ds[0] += gd.iter().zip(xv).map(|(&gv, &xv)| gv * xv).sum::<T>()
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| add_into(d, gd));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(gd.iter().zip(bv))
                        .for_each(|(d, (&g, &o))| *d += g * o)
                });
                acc(*b, &mut |d| {
                    d.iter_mut()
                        .zip(gd.iter().zip(av))
                        .for_each(|(d, (&g, &o))| *d += g * o)
                });
            }
            Op::Relu(x) => {
                let yv = y.expect("value").data();
                acc(*x, &mut |d| {
                    for ((d, &g), &o) in d.iter_mut().zip(gd).zip(yv) {
                        if o > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = y.expect("value").data();
                acc(*x, &mut |d| {
                    d.iter_mut()
                        .zip(gd.iter().zip(yv))
                        .for_each(|(d, (&g, &o))| *d += g * o * (T::one() - o))
                });
            }
            Op::Tanh(x) => {
                let yv = y.expect("value").data();
                acc(*x, &mut |d| {
                    d.iter_mut()
                        .zip(gd.iter().zip(yv))
                        .for_each(|(d, (&g, &o))| *d += g * (T::one() - o * o))
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let in_len = geom.channels * geom.height * geom.width;
                let out_len = geom.out_channels * geom.out_area();
                let (o, p, a) = (geom.out_channels, geom.patch(), geom.out_area());
                let mut cols = vec![T::zero(); p * a];
                acc(*w, &mut |dw| {
                    for (img, gn) in xv.chunks(in_len).zip(gd.chunks(out_len)) {
                        im2col(img, geom, &mut cols);
                        gemm(o, a, p, gn, false, &cols, true, T::one(), dw);
                    }
                });
                acc(*x, &mut |dx| {
                    for (dimg, gn) in dx.chunks_mut(in_len).zip(gd.chunks(out_len)) {
                        gemm(p, o, a, wv, true, gn, false, T::zero(), &mut cols);
                        col2im(&cols, geom, dimg);
                    }
                });
            }
            Op::SpaceToDepth { x, block } => {
                let s = self.value(*x).shape().to_vec();
                acc(*x, &mut |d| {
                    let mut k = 0;
                    for n in 0..s[0] {
                        for c in 0..s[1] {
                            for yy in 0..s[2] {
                                for xx in 0..s[3] {
                                    d[k] += gd[s2d_index(&s, *block, n, c, yy, xx)];
                                    k += 1;
                                }
                            }
                        }
                    }
                });
            }
            Op::SpatialMean(x) => {
                let s = self.value(*x).shape();
                let area = s[2] * s[3];
                let inv = T::one() / T::of(area as f64);
                acc(*x, &mut |d| {
                    for (p, &gv) in d.chunks_mut(area).zip(gd) {
                        p.iter_mut().for_each(|v| *v += gv * inv);
                    }
                });
            }
            Op::ChannelScale { x, g: gate } => {
                let s = self.value(*x).shape();
                let area = s[2] * s[3];
                let (xv, gv) = (self.value(*x).data(), self.value(*gate).data());
                acc(*x, &mut |d| {
                    for ((p, gp), &s) in d.chunks_mut(area).zip(gd.chunks(area)).zip(gv) {
                        p.iter_mut().zip(gp).for_each(|(d, &g)| *d += g * s);
                    }
                });
                acc(*gate, &mut |d| {
                    for ((dv, gp), xp) in d.iter_mut().zip(gd.chunks(area)).zip(xv.chunks(area)) {
                        *dv += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).shape()[1];
                let len = g.shape()[1];
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(n).zip(gd.chunks(len)) {
                        add_into(&mut dr[*start..start + len], gr);
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let (p, q) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                acc(*a, &mut |d| {
                    for (dr, gr) in d.chunks_mut(p).zip(gd.chunks(p + q)) {
                        add_into(dr, &gr[..p]);
                    }
                });
                acc(*b, &mut |d| {
                    for (dr, gr) in d.chunks_mut(q).zip(gd.chunks(p + q)) {
                        add_into(dr, &gr[p..]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let row = g.len() / g.shape()[0].max(1);
                acc(*x, &mut |d| add_into(&mut d[start * row..start * row + gd.len()], gd));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::RowMask { x, keep } => {
                let row = gd.len() / keep.len().max(1);
                acc(*x, &mut |d| {
                    for ((dr, gr), &k) in d.chunks_mut(row.max(1)).zip(gd.chunks(row.max(1))).zip(keep) {
                        if k {
                            add_into(dr, gr);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, gd)),
            Op::WeightedSum { x, w } => {
                let g0 = gd[0];
                acc(*x, &mut |d| d.iter_mut().zip(w).for_each(|(d, &wv)| *d += g0 * wv));
            }
            Op::ScalarFn { inputs, local } => {
                let g0 = gd[0];
                for (&v, l) in inputs.iter().zip(local) {
                    acc(v, &mut |d| {
                        d.iter_mut().zip(l.data()).for_each(|(d, &lv)| *d += g0 * lv)
                    });
                }
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

/// `[N, C, H, W]` to `[N, C·b·b, H/b, W/b]`; output channel `c·b·b + dy·b + dx`
/// holds phase `(dy, dx)` of input channel `c`.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, block: usize) -> Result<Tensor<T>, NnError> {
    let s = x.shape();
    if s.len() != 4 || block == 0 || !s[2].is_multiple_of(block) || !s[3].is_multiple_of(block) {
        return shape_err(format!("space-to-depth block {block} does not divide {s:?}"));
    }
    let mut out = Tensor::zeros(&[s[0], s[1] * block * block, s[2] / block, s[3] / block]);
    let mut k = 0;
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for yy in 0..s[2] {
                for xx in 0..s[3] {
                    dst[s2d_index(s, block, n, c, yy, xx)] = src[k];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, block: usize) -> Result<Tensor<T>, NnError> {
    let s = x.shape();
    let bb = block * block;
    if s.len() != 4 || block == 0 || !s[1].is_multiple_of(bb) {
        return shape_err(format!(
            "depth-to-space block {block} does not divide the channels of {s:?}"
        ));
    }
    let in_shape = [s[0], s[1] / bb, s[2] * block, s[3] * block];
    let mut out = Tensor::zeros(&in_shape);
    let mut k = 0;
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..in_shape[0] {
        for c in 0..in_shape[1] {
            for yy in 0..in_shape[2] {
                for xx in 0..in_shape[3] {
                    dst[k] = src[s2d_index(&in_shape, block, n, c, yy, xx)];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}
