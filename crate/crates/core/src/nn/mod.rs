//! Layer stacks: the desk-scale MLP and LeNet-style CNN, parameter
//! initialisation, forward logits and input gradients.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{shape_str, Scalar};
use crate::tensor::{numel, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointHeader, ModelDescription, ParamRecord, TrainingMetadata, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Maxpool2d {
        window: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    fn describe(&self) -> String {
        match *self {
            LayerSpec::Dense { units } => format!("dense {units}"),
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => format!("conv2d {filters}@{kernel}×{kernel} s{stride} p{padding}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Maxpool2d { window } => format!("maxpool2d {window}"),
            LayerSpec::Flatten => "flatten".into(),
        }
    }
}

/// Flatten → dense 256 → relu → dense `classes`.
pub fn mlp_layers(classes: usize) -> Vec<LayerSpec> {
    mlp_layers_with_hidden(256, classes)
}

pub fn mlp_layers_with_hidden(hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { units: hidden },
        LayerSpec::Relu,
        LayerSpec::Dense { units: classes },
    ]
}

/// conv 32@5×5 → relu → pool 2 → conv 64@5×5 → relu → pool 2 → flatten →
/// dense 1024 → relu → dense `classes`.
pub fn lenet_layers(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            filters: 32,
            kernel: 5,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { window: 2 },
        LayerSpec::Conv2d {
            filters: 64,
            kernel: 5,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::Maxpool2d { window: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 1024 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: classes },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// An ordered layer stack with named parameters in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    classes: usize,
    params: Vec<Param<T>>,
}

/// Per-layer parameter names and shapes implied by a layer stack.
pub(crate) fn param_layout(
    layers: &[LayerSpec],
    input_shape: &[usize],
    classes: usize,
) -> Result<Vec<(String, Vec<usize>)>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Contract(format!(
            "invalid input shape {}",
            shape_str(input_shape)
        )));
    }
    let mut shape = input_shape.to_vec();
    let mut out = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let fail = |detail: String| {
            let (index, from) = if i == 0 {
                (0, format!("input {}", shape_str(input_shape)))
            } else {
                (i - 1, layers[i - 1].describe())
            };
            Error::Build {
                index,
                from,
                next: i,
                to: layer.describe(),
                detail,
            }
        };
        match *layer {
            LayerSpec::Dense { units } => {
                let &[fan_in] = shape.as_slice() else {
                    return Err(fail(format!(
                        "dense needs a flat input, got {}",
                        shape_str(&shape)
                    )));
                };
                if units == 0 {
                    return Err(fail("dense with zero units".into()));
                }
                out.push((format!("dense_{i}/weight"), vec![fan_in, units]));
                out.push((format!("dense_{i}/bias"), vec![units]));
                shape = vec![units];
            }
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(fail(format!(
                        "conv2d needs a C×H×W input, got {}",
                        shape_str(&shape)
                    )));
                };
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err(fail("conv2d sizes must be positive".into()));
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(fail(format!(
                        "kernel {kernel} larger than padded input {}×{}",
                        h + 2 * padding,
                        w + 2 * padding
                    )));
                }
                out.push((format!("conv2d_{i}/kernel"), vec![filters, c, kernel, kernel]));
                out.push((format!("conv2d_{i}/bias"), vec![filters]));
                shape = vec![
                    filters,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ];
            }
            LayerSpec::Relu => {}
            LayerSpec::Maxpool2d { window } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(fail(format!(
                        "maxpool2d needs a C×H×W input, got {}",
                        shape_str(&shape)
                    )));
                };
                if window == 0 || window > h || window > w {
                    return Err(fail(format!("window {window} invalid for {h}×{w}")));
                }
                shape = vec![c, h / window, w / window];
            }
            LayerSpec::Flatten => shape = vec![numel(&shape)],
        }
    }
    if shape != [classes] {
        let last = layers.len().saturating_sub(1);
        return Err(Error::Build {
            index: last,
            from: layers
                .last()
                .map(LayerSpec::describe)
                .unwrap_or_else(|| "input".into()),
            next: layers.len(),
            to: "logits".into(),
            detail: format!(
                "stack ends in {} but the model has {classes} classes",
                shape_str(&shape)
            ),
        });
    }
    Ok(out)
}

/// Input gradient of the summed per-example cross-entropy.
#[derive(Debug, Clone)]
pub struct InputGradient<T> {
    pub grad: Tensor<T>,
    pub losses: Vec<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// He-initialised weights (`N(0, 2/fan_in)`), zero biases.
    pub fn init(
        layers: Vec<LayerSpec>,
        input_shape: &[usize],
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let layout = param_layout(&layers, input_shape, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with("/bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = if shape.len() == 2 {
                        shape[0]
                    } else {
                        numel(&shape[1..])
                    };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive std");
                    Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
                };
                Param { name, value }
            })
            .collect();
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            classes,
            params,
        })
    }

    /// Assembles a model from explicit parameter tensors (declaration order).
    pub fn from_params(
        layers: Vec<LayerSpec>,
        input_shape: &[usize],
        classes: usize,
        values: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let layout = param_layout(&layers, input_shape, classes)?;
        if layout.len() != values.len() {
            return Err(Error::Contract(format!(
                "{} parameter tensors supplied, architecture needs {}",
                values.len(),
                layout.len()
            )));
        }
        let params = layout
            .into_iter()
            .zip(values)
            .map(|((name, shape), value)| {
                if value.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "{name}: expected {}, got {}",
                        shape_str(&shape),
                        shape_str(value.shape())
                    )));
                }
                Ok(Param { name, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            classes,
            params,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Places every parameter on the graph, as trainable leaves or constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), trainable))
            .collect()
    }

    pub fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "batch {} does not match model input B×{}",
                shape_str(shape),
                shape_str(&self.input_shape)
            )));
        }
        Ok(shape[0])
    }

    /// Records the forward pass for `x` (shape `B×input_shape`) on `graph`
    /// using parameter nodes from [`bind`](Self::bind); returns `B×C` logits.
    pub fn forward(&self, graph: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        self.check_batch(graph.value(x))?;
        let mut h = x;
        let mut p = params.iter().copied();
        let mut next = || {
            p.next()
                .ok_or_else(|| Error::Contract("too few parameter nodes bound".into()))
        };
        for layer in &self.layers {
            h = match *layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = (next()?, next()?);
                    let z = graph.matmul(h, w)?;
                    graph.add(z, b)?
                }
                LayerSpec::Conv2d {
                    filters,
                    stride,
                    padding,
                    ..
                } => {
                    let (k, b) = (next()?, next()?);
                    let z = graph.conv2d(h, k, stride, padding)?;
                    let b = graph.reshape(b, &[filters, 1, 1])?;
                    graph.add(z, b)?
                }
                LayerSpec::Relu => graph.relu(h),
                LayerSpec::Maxpool2d { window } => graph.maxpool2d(h, window)?,
                LayerSpec::Flatten => graph.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Pre-softmax scores for a batch.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let z = self.forward(&mut g, &params, x)?;
        Ok(g.value(z).clone())
    }

    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        self.logits(batch)?.argmax_rows()
    }

    pub fn check_labels(&self, labels: &[usize], batch: usize) -> Result<()> {
        if labels.len() != batch {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= self.classes) {
            return Err(Error::Contract(format!(
                "label {l} at index {i} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    /// `∇_x Σ_b CE(f(x_b), labels_b)`. Parameters are treated as constants.
    pub fn input_gradient(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<InputGradient<T>> {
        let b = self.check_batch(batch)?;
        self.check_labels(labels, b)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.param(batch.clone());
        let z = self.forward(&mut g, &params, x)?;
        let ls = g.log_softmax(z)?;
        let picked = g.pick_columns(ls, labels)?;
        let total = g.sum_all(picked)?;
        let loss = g.scale(total, -T::one());
        let mut grads = g.backward(loss)?;
        let grad = grads.take(x).expect("batch leaf requires grad");
        let losses = g.value(picked).data().iter().map(|&v| -v).collect();
        Ok(InputGradient {
            grad,
            losses,
            logits: g.value(z).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_shapes() {
        let m = Model::<f32>::init(vec![LayerSpec::Dense { units: 5 }], &[10], 5, 0).unwrap();
        assert_eq!(m.param("dense_0/weight").unwrap().shape(), &[10, 5]);
        assert_eq!(m.param("dense_0/bias").unwrap().shape(), &[5]);
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::<f32>::init(lenet_layers(10), &[1, 28, 28], 10, 7).unwrap();
        let b = Model::<f32>::init(lenet_layers(10), &[1, 28, 28], 10, 7).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::init(lenet_layers(10), &[1, 28, 28], 10, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lenet_dimensions() {
        let m = Model::<f32>::init(lenet_layers(10), &[1, 28, 28], 10, 0).unwrap();
        assert_eq!(m.param("dense_7/weight").unwrap().shape(), &[1024, 1024]);
        let z = m.logits(&Tensor::zeros(&[2, 1, 28, 28])).unwrap();
        assert_eq!(z.shape(), &[2, 10]);
    }

    #[test]
    fn he_init_std() {
        let m = Model::<f64>::init(vec![LayerSpec::Dense { units: 1000 }], &[1000], 1000, 3)
            .unwrap();
        let w = m.param("dense_0/weight").unwrap();
        let mean = w.mean();
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = (2.0f64 / 1000.0).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.10);
    }

    #[test]
    fn build_error_names_layer_pair() {
        let layers = vec![
            LayerSpec::Conv2d {
                filters: 4,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            LayerSpec::Dense { units: 10 },
        ];
        let err = Model::<f32>::init(layers, &[1, 8, 8], 10, 0).unwrap_err();
        match err {
            Error::Build { index, next, .. } => assert_eq!((index, next), (0, 1)),
            other => panic!("unexpected {other}"),
        }
        let err = Model::<f32>::init(mlp_layers(5), &[1, 4, 4], 10, 0).unwrap_err();
        assert!(matches!(err, Error::Build { .. }));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Model::<f64>::init(mlp_layers(3), &[1, 2, 2], 3, 0).unwrap();
        for p in m.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let z = m.logits(&Tensor::ones(&[4, 1, 2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_mlp() {
        // flatten → dense 2 (W = [[1,2],[3,4]], b = [0.5,-1]) → relu → dense 2 (identity)
        let layers = mlp_layers_with_hidden(2, 2);
        let values = vec![
            Tensor::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap(),
            Tensor::from_f64(vec![2], &[0.5, -1.0]).unwrap(),
            Tensor::from_f64(vec![2, 2], &[1., 0., 0., 1.]).unwrap(),
            Tensor::from_f64(vec![2], &[0., 0.]).unwrap(),
        ];
        let m = Model::<f64>::from_params(layers, &[2], 2, values).unwrap();
        let z = m.logits(&Tensor::ones(&[1, 2])).unwrap();
        // [1,1]·W = [4,6]; + b = [4.5, 5]
        assert_eq!(z.data(), &[4.5, 5.0]);
    }

    #[test]
    fn batch_independence() {
        let m = Model::<f32>::init(lenet_layers(10), &[1, 28, 28], 10, 1).unwrap();
        let x = Tensor::<f32>::from_fn(&[1, 1, 28, 28], |i| ((i * 37) % 255) as f32 / 255.0);
        let xx = Tensor::concat_rows(&[x.clone(), x.clone()]).unwrap();
        let z1 = m.logits(&x).unwrap();
        let z2 = m.logits(&xx).unwrap();
        assert_eq!(z1.data(), &z2.data()[..10]);
        assert_eq!(z1.data(), &z2.data()[10..]);
    }

    #[test]
    fn input_gradient_rejects_bad_labels() {
        let m = Model::<f32>::init(mlp_layers(3), &[1, 2, 2], 3, 0).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        assert!(matches!(
            m.input_gradient(&x, &[0, 3]),
            Err(Error::Contract(_))
        ));
        let g = m.input_gradient(&x, &[0, 2]).unwrap();
        assert_eq!(g.grad.shape(), x.shape());
    }
}
