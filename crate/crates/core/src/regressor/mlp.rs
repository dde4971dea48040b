use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RegressorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub input_width: usize,
    pub hidden_width: usize,
    /// Residual blocks after the input block.
    pub residual_blocks: usize,
    pub output_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LayerSpec {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerSpec {
    fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct BlockSpec {
    layers: [LayerSpec; 3],
    projection: Option<LayerSpec>,
}

/// Residual MLP. Every block applies three affine+ReLU layers and adds a
/// skip path (identity, or a learned projection when widths differ). The
/// output stage is two affine+ReLU layers and a final affine layer. All
/// weights live in one flat vector so optimizers and checkpoints can treat
/// them uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorHead {
    pub config: HeadConfig,
    pub params: Vec<f64>,
    blocks: Vec<BlockSpec>,
    output: [LayerSpec; 3],
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    /// Per block: input, a1, a2, a3 (post-ReLU).
    blocks: Vec<[Array2<f64>; 4]>,
    /// Residual stream after the last block, then the two hidden outputs.
    stem: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x.max(0.0));
}

/// Zeroes the gradient where the forward activation was clamped.
fn relu_mask(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

impl RegressorHead {
    fn build(config: HeadConfig) -> Self {
        let mut offset = 0;
        let mut layer = |inputs: usize, outputs: usize| {
            let l = LayerSpec {
                inputs,
                outputs,
                offset,
            };
            offset += l.len();
            l
        };
        let h = config.hidden_width;
        let mut blocks = Vec::with_capacity(config.residual_blocks + 1);
        for b in 0..=config.residual_blocks {
            let inw = if b == 0 { config.input_width } else { h };
            let layers = [layer(inw, h), layer(h, h), layer(h, h)];
            let projection = (inw != h).then(|| layer(inw, h));
            blocks.push(BlockSpec { layers, projection });
        }
        let output = [layer(h, h), layer(h, h), layer(h, config.output_width)];
        Self {
            config,
            params: vec![0.0; offset],
            blocks,
            output,
        }
    }

    /// All weights zero.
    pub fn zeros(config: HeadConfig) -> Self {
        Self::build(config)
    }

    /// Fan-in scaled Gaussian weights (variance 2/fan_in), zero biases, and
    /// a zero final layer so the initial output is identically zero.
    pub fn new(config: HeadConfig, seed: u64) -> Self {
        let mut head = Self::random(config, seed);
        let last = head.output[2];
        head.params[last.offset..last.offset + last.len()].fill(0.0);
        head
    }

    /// Like [`RegressorHead::new`] but the final layer is random too.
    pub fn random(config: HeadConfig, seed: u64) -> Self {
        let mut head = Self::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<LayerSpec> = head.layer_specs().collect();
        for l in specs {
            let std = (2.0 / l.inputs as f64).sqrt();
            let w = l.outputs * l.inputs;
            for p in &mut head.params[l.offset..l.offset + w] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        head
    }

    fn layer_specs(&self) -> impl Iterator<Item = LayerSpec> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| b.layers.iter().copied().chain(b.projection))
            .chain(self.output.iter().copied())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn output_width(&self) -> usize {
        self.config.output_width
    }

    fn weight(&self, l: LayerSpec) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (l.outputs, l.inputs),
            &self.params[l.offset..l.offset + l.outputs * l.inputs],
        )
        .expect("layer layout")
    }

    fn bias(&self, l: LayerSpec) -> ArrayView1<'_, f64> {
        let w = l.outputs * l.inputs;
        ArrayView1::from(&self.params[l.offset + w..l.offset + l.len()])
    }

    fn affine(&self, l: LayerSpec, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight(l).t());
        z += &self.bias(l);
        z
    }

    /// Zeroes the three inner layers of block `b` (test helper for the skip path).
    pub fn zero_block(&mut self, b: usize) {
        for l in self.blocks[b].layers {
            self.params[l.offset..l.offset + l.len()].fill(0.0);
        }
    }

    /// Forward pass over a batch (one row per sample).
    pub fn forward_batch(
        &self,
        input: &Array2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache), RegressorError> {
        if input.ncols() != self.config.input_width {
            return Err(RegressorError::DimensionMismatch {
                expected: self.config.input_width,
                got: input.ncols(),
            });
        }
        let mut x = input.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut a1 = self.affine(b.layers[0], &x);
            relu_inplace(&mut a1);
            let mut a2 = self.affine(b.layers[1], &a1);
            relu_inplace(&mut a2);
            let mut a3 = self.affine(b.layers[2], &a2);
            relu_inplace(&mut a3);
            let next = match b.projection {
                Some(p) => &a3 + &self.affine(p, &x),
                None => &a3 + &x,
            };
            blocks.push([x, a1, a2, a3]);
            x = next;
        }
        let mut h1 = self.affine(self.output[0], &x);
        relu_inplace(&mut h1);
        let mut h2 = self.affine(self.output[1], &h1);
        relu_inplace(&mut h2);
        let out = self.affine(self.output[2], &h2);
        Ok((
            out,
            ForwardCache {
                blocks,
                stem: x,
                h1,
                h2,
            },
        ))
    }

    /// Single-sample convenience wrapper.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, RegressorError> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
        let (out, _) = self.forward_batch(&x)?;
        Ok(out.row(0).to_vec())
    }

    fn accumulate(&self, grads: &mut [f64], l: LayerSpec, dz: &Array2<f64>, x: &Array2<f64>) {
        let w = l.outputs * l.inputs;
        let (gw, gb) = grads[l.offset..l.offset + l.len()].split_at_mut(w);
        let mut gw = ArrayViewMut2::from_shape((l.outputs, l.inputs), gw).expect("layer layout");
        gw += &dz.t().dot(x);
        let mut gb = ArrayViewMut1::from(gb);
        gb += &dz.sum_axis(Axis(0));
    }

    /// Reverse pass: accumulates dL/dθ into `grads` given dL/d(output).
    /// Returns dL/d(input).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        assert_eq!(grads.len(), self.params.len());
        self.accumulate(grads, self.output[2], d_out, &cache.h2);
        let mut d = d_out.dot(&self.weight(self.output[2]));
        relu_mask(&mut d, &cache.h2);
        self.accumulate(grads, self.output[1], &d, &cache.h1);
        let mut d_h1 = d.dot(&self.weight(self.output[1]));
        relu_mask(&mut d_h1, &cache.h1);
        self.accumulate(grads, self.output[0], &d_h1, &cache.stem);
        let mut d_x = d_h1.dot(&self.weight(self.output[0]));

        for (b, [x, a1, a2, a3]) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut d3 = d_x.clone();
            relu_mask(&mut d3, a3);
            self.accumulate(grads, b.layers[2], &d3, a2);
            let mut d2 = d3.dot(&self.weight(b.layers[2]));
            relu_mask(&mut d2, a2);
            self.accumulate(grads, b.layers[1], &d2, a1);
            let mut d1 = d2.dot(&self.weight(b.layers[1]));
            relu_mask(&mut d1, a1);
            self.accumulate(grads, b.layers[0], &d1, x);
            let mut d_in = d1.dot(&self.weight(b.layers[0]));
            match b.projection {
                Some(p) => {
                    self.accumulate(grads, p, &d_x, x);
                    d_in += &d_x.dot(&self.weight(p));
                }
                None => d_in += &d_x,
            }
            d_x = d_in;
        }
        d_x
    }
}

/// Straight-line single-sample evaluation used as an independent reference
/// in tests: plain loops, no ndarray.
#[cfg(test)]
pub(crate) fn reference_forward(head: &RegressorHead, input: &[f64]) -> Vec<f64> {
    let affine = |l: LayerSpec, x: &[f64]| -> Vec<f64> {
        (0..l.outputs)
            .map(|o| {
                let row = &head.params[l.offset + o * l.inputs..l.offset + (o + 1) * l.inputs];
                let b = head.params[l.offset + l.outputs * l.inputs + o];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
            })
            .collect()
    };
    let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.max(0.0)).collect() };
    let mut x = input.to_vec();
    for b in &head.blocks {
        let a3 = relu(affine(
            b.layers[2],
            &relu(affine(b.layers[1], &relu(affine(b.layers[0], &x)))),
        ));
        let skip = match b.projection {
            Some(p) => affine(p, &x),
            None => x.clone(),
        };
        x = a3.iter().zip(&skip).map(|(a, s)| a + s).collect();
    }
    let h2 = relu(affine(head.output[1], &relu(affine(head.output[0], &x))));
    affine(head.output[2], &h2)
}
