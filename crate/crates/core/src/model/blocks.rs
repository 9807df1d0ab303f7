//! Parameterized building blocks shared by the encoders and decoders.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Registration context: parameter store, initializer RNG and a name prefix.
pub(crate) struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let value = he_normal(shape, fan_in, self.rng);
        self.store.register(name, value)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.register(name, Tensor::full(shape.to_vec(), T::of(value)))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Conv {
            weight: b.weight(format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel], cin * kernel.pow(3))?,
            bias: b.constant(format!("{name}.bias"), &[cout], 0.0)?,
            stride,
            padding: kernel / 2,
        })
    }

    /// All-zero weights and bias.
    pub fn zeroed<T: Scalar, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Conv {
            weight: b.constant(format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel], 0.0)?,
            bias: b.constant(format!("{name}.bias"), &[cout], 0.0)?,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        tape.conv3d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            gamma: b.constant(format!("{name}.gamma"), &[channels], 1.0)?,
            beta: b.constant(format!("{name}.beta"), &[channels], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = store.var(tape, self.gamma);
        let b = store.var(tape, self.beta);
        tape.instance_norm(x, g, b, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.weight(format!("{name}.weight"), &[dout, din], din)?,
            bias: b.constant(format!("{name}.bias"), &[dout], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        tape.fully_connected(x, w, b)
    }
}

/// Two conv–instance-norm–LeakyReLU layers plus an additive shortcut
/// (1×1×1 projection when the channel count changes).
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv::new(b, &format!("{name}.conv1"), cin, cout, 3, 1)?,
            norm1: Norm::new(b, &format!("{name}.norm1"), cout)?,
            conv2: Conv::new(b, &format!("{name}.conv2"), cout, cout, 3, 1)?,
            norm2: Norm::new(b, &format!("{name}.norm2"), cout)?,
            shortcut: if cin != cout {
                Some(Conv::new(b, &format!("{name}.shortcut"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var, slope: f64) -> Result<Var> {
        let h = self.conv1.forward(store, tape, x)?;
        let h = self.norm1.forward(store, tape, h)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.conv2.forward(store, tape, h)?;
        let h = self.norm2.forward(store, tape, h)?;
        let h = tape.leaky_relu(h, slope);
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(store, tape, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Residual block whose normalization scale and shift come from outside
/// (adaptive instance normalization).
#[derive(Clone, Debug)]
pub(crate) struct AdaptiveResBlock {
    conv1: Conv,
    conv2: Conv,
}

/// Per-channel `(scale, shift)` pairs for the two norms of an [`AdaptiveResBlock`].
pub(crate) struct Styles {
    pub first: (Var, Var),
    pub second: (Var, Var),
}

impl AdaptiveResBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, channels: usize) -> Result<Self> {
        Ok(AdaptiveResBlock {
            conv1: Conv::new(b, &format!("{name}.conv1"), channels, channels, 3, 1)?,
            conv2: Conv::new(b, &format!("{name}.conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        styles: &Styles,
        slope: f64,
    ) -> Result<Var> {
        let h = self.conv1.forward(store, tape, x)?;
        let h = tape.instance_norm(h, styles.first.0, styles.first.1, NORM_EPS)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.conv2.forward(store, tape, h)?;
        let h = tape.instance_norm(h, styles.second.0, styles.second.1, NORM_EPS)?;
        tape.add(x, h)
    }
}
