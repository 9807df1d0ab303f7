//! Forward evaluation and backward rules for every tape operation.

use super::conv::{self, ConvGeometry};
use super::{CustomBackward, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    // Branch on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn volume_dims(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(Error::dim(format!("{what} expects [C, D, H, W], got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, op))
    }

    /// 3D convolution of `[Cin, D, H, W]` with a `[Cout, Cin, k, k, k]` kernel.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [cin, d, h, w] = volume_dims(self.shape(input), "conv3d input")?;
        let [cout, wcin, k, k2, k3] = match *self.shape(weight) {
            [a, b, c, d, e] => [a, b, c, d, e],
            ref s => return Err(Error::dim(format!("conv3d weight must be 5-D, got {s:?}"))),
        };
        if k != k2 || k != k3 || k % 2 == 0 {
            return Err(Error::dim(format!("conv3d kernel must be cubic and odd, got {k}x{k2}x{k3}")));
        }
        if wcin != cin {
            return Err(Error::dim(format!("conv3d input has {cin} channels, weight expects {wcin}")));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::dim(format!("conv3d bias must be [{cout}], got {:?}", self.shape(bias))));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::contract(format!("conv3d stride must be 1 or 2, got {stride}")));
        }
        let mut output = [0; 3];
        for (o, &e) in output.iter_mut().zip(&[d, h, w]) {
            *o = ConvGeometry::output_extent(e, k, stride, padding)
                .ok_or_else(|| Error::dim(format!("conv3d output is empty for extent {e}, kernel {k}")))?;
        }
        let geometry = ConvGeometry {
            cin,
            cout,
            input: [d, h, w],
            output,
            kernel: k,
            stride,
            padding,
        };
        let data = conv::forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new([cout, output[0], output[1], output[2]], data)?;
        Ok(self.push(value, Op::Conv3d { input, weight, bias, geometry }))
    }

    /// Per-channel normalization over the spatial extent, then `gamma·x̂ + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        let n = xv.spatial_len();
        if xv.shape().len() < 2 || n < 2 {
            return Err(Error::Degenerate(format!(
                "instance_norm needs at least 2 spatial voxels, got shape {:?}",
                xv.shape()
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "instance_norm over {c} channels got gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let src = &xv.data()[ch * n..(ch + 1) * n];
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ch] = T::of(istd);
            let mean = T::of(mean);
            for j in 0..n {
                let xhat = (src[j] - mean) * inv_std[ch];
                normalized[ch * n + j] = xhat;
                out[ch * n + j] = g[ch] * xhat + b[ch];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::InstanceNorm { x, gamma, beta, normalized, inv_std }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::LeakyRelu(slope) => self.leaky_relu(x, slope),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, |v| if v >= T::zero() { v } else { s * v }, Op::LeakyRelu { x, slope: s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp { x })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let f = T::of(floor);
        self.unary(x, |v| v.max(f).ln(), Op::Log { x, floor: f })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p / q, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        self.unary(x, |v| v * f, Op::Scale { x, factor: f })
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, |v| v + c, Op::Offset { x })
    }

    /// Multiplies every channel of `x: [C, ...]` by the single-channel `gate: [1, ...]`.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        if gv.channels() != 1 || xv.spatial_shape() != gv.spatial_shape() {
            return Err(Error::dim(format!(
                "mul_channels: gate {:?} does not broadcast over {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let n = xv.spatial_len();
        let g = gv.data();
        let data = xv
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(g).map(|(&v, &w)| v * w))
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::MulChannels { x, gate }))
    }

    /// Nearest-neighbour upsampling by 2 along each spatial axis.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [c, d, h, w] = volume_dims(self.shape(x), "upsample2x")?;
        let src = self.value(x).data();
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![T::zero(); c * d2 * h2 * w2];
        for ch in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    let s = &src[((ch * d + z / 2) * h + y / 2) * w..][..w];
                    let o = &mut out[((ch * d2 + z) * h2 + y) * w2..][..w2];
                    for (xo, v) in o.iter_mut().enumerate() {
                        *v = s[xo / 2];
                    }
                }
            }
        }
        let value = Tensor::new([c, d2, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample2x { x }))
    }

    /// 2×2×2 average pooling; every spatial extent must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let [c, d, h, w] = volume_dims(self.shape(x), "avg_pool2x")?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("avg_pool2x needs even extents, got {:?}", self.shape(x))));
        }
        let src = self.value(x).data();
        let (d2, h2, w2) = (d / 2, h / 2, w / 2);
        let at = |ch: usize, z: usize, y: usize, xi: usize| src[((ch * d + z) * h + y) * w + xi];
        let eighth = T::of(0.125);
        let mut out = Vec::with_capacity(c * d2 * h2 * w2);
        for ch in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    for xo in 0..w2 {
                        let (z0, y0, x0) = (2 * z, 2 * y, 2 * xo);
                        // Pairwise order keeps the mean of eight equal values exact.
                        let lo = (at(ch, z0, y0, x0) + at(ch, z0, y0, x0 + 1))
                            + (at(ch, z0, y0 + 1, x0) + at(ch, z0, y0 + 1, x0 + 1));
                        let hi = (at(ch, z0 + 1, y0, x0) + at(ch, z0 + 1, y0, x0 + 1))
                            + (at(ch, z0 + 1, y0 + 1, x0) + at(ch, z0 + 1, y0 + 1, x0 + 1));
                        out.push((lo + hi) * eighth);
                    }
                }
            }
        }
        let value = Tensor::new([c, d2, h2, w2], out)?;
        Ok(self.push(value, Op::AvgPool2x { x }))
    }

    /// `[C, ...] -> [C]`, the mean over each channel's spatial extent.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.spatial_len();
        let inv = T::of(1.0 / n as f64);
        let data = xv.data().chunks_exact(n).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new([xv.channels()], data).expect("channel count is positive");
        self.push(value, Op::GlobalAvgPool { x })
    }

    /// `[Din] -> [Dout]` affine map `W·x + b`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let (dout, din) = match *ws {
            [o, i] => (o, i),
            _ => return Err(Error::dim(format!("fully_connected weight must be 2-D, got {ws:?}"))),
        };
        if xs != [din] || bs != [dout] {
            return Err(Error::dim(format!(
                "fully_connected: input {xs:?} / bias {bs:?} incompatible with weight {ws:?}"
            )));
        }
        let mut out = self.value(bias).data().to_vec();
        T::gemm(dout, din, 1, self.value(weight).data(), false, self.value(x).data(), false, &mut out, true);
        let value = Tensor::new([dout], out)?;
        Ok(self.push(value, Op::Linear { x, weight, bias }))
    }

    /// Stacks tensors along the leading (channel) axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_channels needs at least one input"))?;
        let spatial = self.value(first).spatial_shape().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.spatial_shape() != spatial.as_slice() {
                return Err(Error::dim(format!(
                    "concat_channels: spatial extents {:?} and {:?} differ",
                    spatial,
                    v.spatial_shape()
                )));
            }
            channels += v.channels();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![channels];
        shape.extend(spatial);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.channels() {
            return Err(Error::dim(format!(
                "slice_channels {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let n = xv.spatial_len();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, xv.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(value, Op::Slice { x, start }))
    }

    /// Softmax across the leading axis, independently at every voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (k, n) = (xv.channels(), xv.spatial_len());
        if k < 2 {
            return Err(Error::dim(format!("softmax_channels needs at least 2 channels, got {k}")));
        }
        let src = xv.data();
        let mut out = vec![T::zero(); k * n];
        for j in 0..n {
            let max = (0..k).map(|c| src[c * n + j]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..k {
                let e = (src[c * n + j] - max).exp();
                out[c * n + j] = e;
                total += e;
            }
            for c in 0..k {
                out[c * n + j] = out[c * n + j] / total;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        self.push(value, Op::Mean { x })
    }

    /// `[C, ...] -> [C]`, the sum over each channel's spatial extent.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.spatial_len();
        let data = xv.data().chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
        let value = Tensor::new([xv.channels()], data).expect("channel count is positive");
        self.push(value, Op::SumSpatial { x })
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Input gradients contributed by one node given its upstream gradient.
    pub(super) fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let y = &node.value;
        let like = |v: Var, data: Vec<T>| {
            (v, Tensor::new(self.shape(v), data).expect("gradient matches input shape"))
        };
        let elementwise = |x: Var, f: &dyn Fn(T, T, T) -> T| {
            let xv = self.value(x).data();
            let data = xv
                .iter()
                .zip(y.data())
                .zip(dy.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            vec![like(x, data)]
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv3d { input, weight, bias, geometry } => {
                let need = [*input, *weight, *bias].map(|v| self.requires_grad(v));
                let g = conv::backward(geometry, self.value(*input).data(), self.value(*weight).data(), dy.data(), need);
                let mut out = Vec::new();
                if let Some(d) = g.input {
                    out.push(like(*input, d));
                }
                if let Some(d) = g.weight {
                    out.push(like(*weight, d));
                }
                if let Some(d) = g.bias {
                    out.push(like(*bias, d));
                }
                out
            }
            Op::InstanceNorm { x, gamma, beta, normalized, inv_std } => {
                let c = inv_std.len();
                let n = normalized.len() / c;
                let g = self.value(*gamma).data();
                let dyd = dy.data();
                let mut dx = vec![T::zero(); c * n];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let nt = T::of(n as f64);
                for ch in 0..c {
                    let xhat = &normalized[ch * n..(ch + 1) * n];
                    let dyc = &dyd[ch * n..(ch + 1) * n];
                    let sum_dy: T = dyc.iter().copied().sum();
                    let sum_dy_xhat: T = dyc.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
                    dbeta[ch] = sum_dy;
                    dgamma[ch] = sum_dy_xhat;
                    let k = g[ch] * inv_std[ch] / nt;
                    for j in 0..n {
                        dx[ch * n + j] = k * (nt * dyc[j] - sum_dy - xhat[j] * sum_dy_xhat);
                    }
                }
                vec![like(*x, dx), like(*gamma, dgamma), like(*beta, dbeta)]
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                elementwise(*x, &|xi, _, gi| if xi >= T::zero() { gi } else { gi * s })
            }
            Op::Sigmoid { x } => elementwise(*x, &|_, yi, gi| gi * yi * (T::one() - yi)),
            Op::Exp { x } => elementwise(*x, &|_, yi, gi| gi * yi),
            Op::Log { x, floor } => {
                let f = *floor;
                elementwise(*x, &|xi, _, gi| if xi > f { gi / xi } else { T::zero() })
            }
            Op::Abs { x } => elementwise(*x, &|xi, _, gi| gi * xi.signum()),
            Op::Scale { x, factor } => {
                let f = *factor;
                elementwise(*x, &|_, _, gi| gi * f)
            }
            Op::Offset { x } => vec![(*x, dy.clone())],
            Op::Add { a, b } => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub { a, b } => vec![(*a, dy.clone()), (*b, dy.map(|v| -v))],
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = dy.data().iter().zip(vb).map(|(&g, &q)| g * q).collect();
                let db = dy.data().iter().zip(va).map(|(&g, &p)| g * p).collect();
                vec![like(*a, da), like(*b, db)]
            }
            Op::Div { a, b } => {
                let vb = self.value(*b).data();
                let da = dy.data().iter().zip(vb).map(|(&g, &q)| g / q).collect();
                let db = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(vb)
                    .map(|((&g, &yi), &q)| -g * yi / q)
                    .collect();
                vec![like(*a, da), like(*b, db)]
            }
            Op::MulChannels { x, gate } => {
                let (xv, gv) = (self.value(*x), self.value(*gate));
                let n = gv.len();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![T::zero(); n];
                for (xrow, grow) in xv.data().chunks_exact(n).zip(dy.data().chunks_exact(n)) {
                    for j in 0..n {
                        dx.push(grow[j] * gv.data()[j]);
                        dg[j] += grow[j] * xrow[j];
                    }
                }
                vec![like(*x, dx), like(*gate, dg)]
            }
            Op::Upsample2x { x } => {
                let [c, d, h, w] = volume_dims(self.shape(*x), "upsample2x").expect("checked in forward");
                let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
                let mut dx = vec![T::zero(); c * d * h * w];
                for ch in 0..c {
                    for z in 0..d2 {
                        for yy in 0..h2 {
                            let g = &dy.data()[((ch * d2 + z) * h2 + yy) * w2..][..w2];
                            let o = &mut dx[((ch * d + z / 2) * h + yy / 2) * w..][..w];
                            for (xo, &gv) in g.iter().enumerate() {
                                o[xo / 2] += gv;
                            }
                        }
                    }
                }
                vec![like(*x, dx)]
            }
            Op::AvgPool2x { x } => {
                let [c, d, h, w] = volume_dims(self.shape(*x), "avg_pool2x").expect("checked in forward");
                let (d2, h2, w2) = (d / 2, h / 2, w / 2);
                let eighth = T::of(0.125);
                let mut dx = vec![T::zero(); c * d * h * w];
                for ch in 0..c {
                    for z in 0..d {
                        for yy in 0..h {
                            let g = &dy.data()[((ch * d2 + z / 2) * h2 + yy / 2) * w2..][..w2];
                            let o = &mut dx[((ch * d + z) * h + yy) * w..][..w];
                            for (xi, v) in o.iter_mut().enumerate() {
                                *v = g[xi / 2] * eighth;
                            }
                        }
                    }
                }
                vec![like(*x, dx)]
            }
            Op::GlobalAvgPool { x } => {
                let n = self.value(*x).spatial_len();
                let inv = T::of(1.0 / n as f64);
                let dx = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, n)).collect();
                vec![like(*x, dx)]
            }
            Op::Linear { x, weight, bias } => {
                let (dout, din) = (self.shape(*weight)[0], self.shape(*weight)[1]);
                let mut dx = vec![T::zero(); din];
                T::gemm(din, dout, 1, self.value(*weight).data(), true, dy.data(), false, &mut dx, false);
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, 1, din, dy.data(), false, self.value(*x).data(), false, &mut dw, false);
                vec![like(*x, dx), like(*weight, dw), (*bias, dy.clone())]
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).len();
                        let g = dy.data()[offset..offset + len].to_vec();
                        offset += len;
                        like(p, g)
                    })
                    .collect()
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let n = xv.spatial_len();
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                vec![like(*x, dx)]
            }
            Op::Softmax { x } => {
                let (k, n) = (y.channels(), y.spatial_len());
                let (yd, gd) = (y.data(), dy.data());
                let mut dx = vec![T::zero(); k * n];
                for j in 0..n {
                    let dot: T = (0..k).map(|c| yd[c * n + j] * gd[c * n + j]).sum();
                    for c in 0..k {
                        dx[c * n + j] = yd[c * n + j] * (gd[c * n + j] - dot);
                    }
                }
                vec![like(*x, dx)]
            }
            Op::Sum { x } => {
                let g = dy.item();
                vec![like(*x, vec![g; self.value(*x).len()])]
            }
            Op::Mean { x } => {
                let len = self.value(*x).len();
                let g = dy.item() / T::of(len as f64);
                vec![like(*x, vec![g; len])]
            }
            Op::SumSpatial { x } => {
                let n = self.value(*x).spatial_len();
                let dx = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
                vec![like(*x, dx)]
            }
            Op::Custom { inputs, backward, .. } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                inputs.iter().copied().zip(backward(&values, y, dy)).collect()
            }
        }
    }
}
