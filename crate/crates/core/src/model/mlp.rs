//! Fully connected ReLU stack with a sigmoid output unit, plus its exact
//! reverse-mode gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{affine, dot, relu, sigmoid, DenseMatrix, DenseVector};
use crate::train::Adagrad;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: DenseMatrix,
    pub b: DenseVector,
    pub acc_w: Vec<f64>,
    pub acc_b: Vec<f64>,
}

impl DenseLayer {
    pub fn new(w: DenseMatrix, b: DenseVector) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(Error::dim(
                "DenseLayer",
                w.shape(),
                format!("b[{}]", b.len()),
            ));
        }
        let acc_w = vec![0.0; w.values().len()];
        let acc_b = vec![0.0; b.len()];
        Ok(DenseLayer { w, b, acc_w, acc_b })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    pub layers: Vec<DenseLayer>,
    pub out_w: DenseVector,
    pub out_b: f64,
    pub acc_out_w: Vec<f64>,
    pub acc_out_b: f64,
}

impl MlpParameters {
    /// Builds the stack from explicit weights, checking that shapes chain.
    pub fn from_layers(layers: Vec<DenseLayer>, out_w: DenseVector, out_b: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("MLP needs at least one hidden layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].w.cols() != pair[0].w.rows() {
                return Err(Error::dim(
                    "MlpParameters",
                    pair[0].w.shape(),
                    pair[1].w.shape(),
                ));
            }
        }
        let last = layers[layers.len() - 1].w.rows();
        if out_w.len() != last {
            return Err(Error::dim(
                "MlpParameters",
                format!("last layer width {last}"),
                format!("out_w[{}]", out_w.len()),
            ));
        }
        let acc_out_w = vec![0.0; out_w.len()];
        Ok(MlpParameters {
            layers,
            out_w,
            out_b,
            acc_out_w,
            acc_out_b: 0.0,
        })
    }

    /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
    /// Draw order: each hidden layer row-major, then the output weights.
    pub fn glorot<R: Rng>(input_dim: usize, layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(layer_dims.len());
        let mut fan_in = input_dim;
        for &width in layer_dims {
            let w = glorot_matrix(width, fan_in, rng);
            layers.push(DenseLayer::new(w, DenseVector::zeros(width))?);
            fan_in = width;
        }
        let limit = (6.0 / (fan_in as f64 + 1.0)).sqrt();
        let out_w = (0..fan_in)
            .map(|_| rng.gen_range(-limit..limit))
            .collect::<Vec<_>>();
        Self::from_layers(layers, out_w.into(), 0.0)
    }

    pub fn zeros(input_dim: usize, layer_dims: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for &width in layer_dims {
            layers.push(DenseLayer::new(
                DenseMatrix::zeros(width, fan_in),
                DenseVector::zeros(width),
            )?);
            fan_in = width;
        }
        Self::from_layers(layers, DenseVector::zeros(fan_in), 0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.out_w.len()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.w.rows()).collect()
    }

    pub fn apply_adagrad(&mut self, grads: &MlpGradients, scale: f64, opt: &Adagrad) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            opt.step_scaled(layer.w.values_mut(), gw.values(), &mut layer.acc_w, scale);
            opt.step_scaled(layer.b.as_mut_slice(), gb, &mut layer.acc_b, scale);
        }
        opt.step_scaled(
            self.out_w.as_mut_slice(),
            &grads.out_w,
            &mut self.acc_out_w,
            scale,
        );
        opt.step_scalar(&mut self.out_b, grads.out_b * scale, &mut self.acc_out_b);
    }
}

fn glorot_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    DenseMatrix::from_row_major(rows, cols, values).expect("shape built from rows*cols")
}

/// Activations of one forward pass through the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub input: DenseVector,
    pub pre_activations: Vec<DenseVector>,
    pub activations: Vec<DenseVector>,
    pub logit: f64,
    pub y_hat: f64,
}

impl MlpCache {
    /// Output of the last hidden layer.
    pub fn z_last(&self) -> &DenseVector {
        self.activations.last().expect("at least one layer")
    }
}

pub fn mlp_forward(v: DenseVector, params: &MlpParameters) -> Result<MlpCache> {
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut activations: Vec<DenseVector> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = activations.last().map_or(v.as_slice(), |z| z.as_slice());
        let pre = affine(&layer.w, input, &layer.b)?;
        activations.push(relu(&pre));
        pre_activations.push(pre);
    }
    let z_last = activations.last().expect("non-empty stack");
    let logit = dot(&params.out_w, z_last)? + params.out_b;
    Ok(MlpCache {
        input: v,
        pre_activations,
        activations,
        logit,
        y_hat: sigmoid(logit),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<(DenseMatrix, Vec<f64>)>,
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpParameters) -> Self {
        MlpGradients {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        DenseMatrix::zeros(l.w.rows(), l.w.cols()),
                        vec![0.0; l.b.len()],
                    )
                })
                .collect(),
            out_w: vec![0.0; params.out_w.len()],
            out_b: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.out_b == 0.0
            && self.out_w.iter().all(|&g| g == 0.0)
            && self
                .layers
                .iter()
                .all(|(w, b)| w.values().iter().chain(b).all(|&g| g == 0.0))
    }
}

fn check_cache(cache: &MlpCache, params: &MlpParameters) -> Result<()> {
    if cache.activations.len() != params.layers.len()
        || cache.input.len() != params.input_dim()
        || cache
            .activations
            .iter()
            .zip(&params.layers)
            .any(|(z, l)| z.len() != l.w.rows())
    {
        return Err(Error::dim(
            "mlp_backward",
            format!(
                "cache input {} / {} layers",
                cache.input.len(),
                cache.activations.len()
            ),
            format!("params {} -> {:?}", params.input_dim(), params.layer_dims()),
        ));
    }
    Ok(())
}

/// Adds the gradient of `dloss_dlogit * logit` into `grads` and returns the
/// gradient with respect to the stack input. ReLU'(0) is taken as 0.
pub fn mlp_backward_into(
    cache: &MlpCache,
    params: &MlpParameters,
    dloss_dlogit: f64,
    grads: &mut MlpGradients,
) -> Result<DenseVector> {
    check_cache(cache, params)?;
    let n = params.layers.len();
    grads.out_b += dloss_dlogit;
    for (g, z) in grads.out_w.iter_mut().zip(cache.z_last().iter()) {
        *g += dloss_dlogit * z;
    }
    let mut delta: Vec<f64> = params.out_w.iter().map(|w| w * dloss_dlogit).collect();
    for l in (0..n).rev() {
        for (d, &pre) in delta.iter_mut().zip(cache.pre_activations[l].iter()) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
        let input = if l == 0 {
            cache.input.as_slice()
        } else {
            cache.activations[l - 1].as_slice()
        };
        let (gw, gb) = &mut grads.layers[l];
        gw.add_outer(&delta, input, 1.0);
        for (g, d) in gb.iter_mut().zip(&delta) {
            *g += d;
        }
        delta = params.layers[l].w.transpose_mul(&delta)?.into_vec();
    }
    Ok(delta.into())
}

pub fn mlp_backward(
    cache: &MlpCache,
    params: &MlpParameters,
    dloss_dlogit: f64,
) -> Result<(MlpGradients, DenseVector)> {
    let mut grads = MlpGradients::zeros_like(params);
    let dv = mlp_backward_into(cache, params, dloss_dlogit, &mut grads)?;
    Ok((grads, dv))
}
