use mfcl_grad::nn::{self, Bound, Layer, Mode, ParamStore, Trace};
use mfcl_grad::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::seed;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Noise-to-image network trained on the server without data.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub preset: String,
    pub z_dim: usize,
    pub output_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub params: ParamStore,
}

/// Dense projection to `channels x side x side`, then `widths.len()`
/// upsampling blocks (interpolate, 3x3 conv, norm, leaky rectifier) with the
/// last block replaced by a conv to `out_channels`, tanh and a final norm.
fn upsampling_stack(z_dim: usize, channels: usize, side: usize, widths: &[usize], out_channels: usize) -> Vec<Layer> {
    let mut layers = vec![
        Layer::linear("fc", z_dim, channels * side * side),
        Layer::Reshape {
            shape: vec![channels, side, side],
        },
        Layer::bn("bn0", channels),
    ];
    let mut cin = channels;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(Layer::Upsample2);
        layers.push(Layer::conv(format!("conv{}", i + 1), cin, w, 3, 1, 1, true));
        layers.push(Layer::bn(format!("bn{}", i + 1), w));
        layers.push(Layer::LeakyRelu { slope: LEAKY_SLOPE });
        cin = w;
    }
    layers.push(Layer::conv("conv_out", cin, out_channels, 3, 1, 1, true));
    layers.push(Layer::Tanh);
    layers.push(Layer::bn("bn_out", out_channels));
    layers
}

/// Generator layers for a dataset, with the dataset's image shape.
///
/// - `cifar10`, `cifar100`: 128x8x8 projection, two blocks, 3x32x32.
/// - `tinyimagenet`: 128x8x8 projection, three blocks, 3x64x64.
/// - `superimagenet`, `imagenet`: 64x7x7 projection, five blocks, 3x224x224.
/// - `synth10`: 32x4x4 projection, two blocks, 1x16x16.
pub fn generator_layers(dataset: &str, z_dim: usize) -> Result<(Vec<Layer>, [usize; 3])> {
    if z_dim == 0 {
        return Err(Error::Config("generator noise dimension must be positive".into()));
    }
    Ok(match dataset {
        "cifar10" | "cifar100" => (upsampling_stack(z_dim, 128, 8, &[128, 64], 3), [3, 32, 32]),
        "tinyimagenet" => (upsampling_stack(z_dim, 128, 8, &[128, 128, 64], 3), [3, 64, 64]),
        "superimagenet" | "imagenet" => (upsampling_stack(z_dim, 64, 7, &[64; 5], 3), [3, 224, 224]),
        "synth10" => (upsampling_stack(z_dim, 32, 4, &[32, 16], 1), [1, 16, 16]),
        other => return Err(Error::Config(format!("no generator preset for dataset `{other}`"))),
    })
}

pub fn build_generator(dataset: &str, z_dim: usize, seed: u64) -> Result<GeneratorNet> {
    let (layers, output_shape) = generator_layers(dataset, z_dim)?;
    let out = nn::infer_shape(&layers, &[z_dim]).map_err(Error::Shape)?;
    debug_assert_eq!(out, output_shape.to_vec());
    let mut params = ParamStore::new();
    nn::init_params(&layers, &mut params, &mut seed::rng(seed, &[seed::GENERATOR, seed::INIT]));
    Ok(GeneratorNet {
        preset: dataset.into(),
        z_dim,
        output_shape,
        layers,
        params,
    })
}

impl GeneratorNet {
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(graph, trainable)
    }

    pub fn forward(&self, graph: &mut Graph, bound: &Bound, z: Var, mode: Mode, trace: &mut Trace) -> Var {
        nn::forward(&self.layers, graph, &self.params, bound, z, mode, trace)
    }

    /// Eval-mode images for a `[B, z_dim]` noise batch.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.dim(1) != self.z_dim {
            return Err(Error::Shape(format!("generator expects [B, {}] noise, got {:?}", self.z_dim, z.shape())));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &bound, zv, Mode::Eval, &mut Trace::default());
        Ok(g.value(out).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.trainable_numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(layers: &[Layer], pred: impl Fn(&Layer) -> bool) -> usize {
        layers.iter().filter(|l| pred(l)).count()
    }

    #[test]
    fn presets_follow_the_architecture_table() {
        for (name, z, fc_out, ups, shape) in [
            ("cifar100", 200, 128 * 64, 2, [3, 32, 32]),
            ("tinyimagenet", 400, 128 * 64, 3, [3, 64, 64]),
            ("superimagenet", 200, 64 * 49, 5, [3, 224, 224]),
        ] {
            let (layers, out) = generator_layers(name, z).unwrap();
            assert_eq!(out, shape);
            assert_eq!(count(&layers, |l| matches!(l, Layer::Upsample2)), ups, "{name}");
            match &layers[0] {
                Layer::Linear {
                    in_features,
                    out_features,
                    ..
                } => assert_eq!((*in_features, *out_features), (z, fc_out)),
                other => panic!("{other:?}"),
            }
            assert!(matches!(layers[layers.len() - 2], Layer::Tanh));
            assert!(matches!(layers.last(), Some(Layer::BatchNorm { channels: 3, .. })));
            assert_eq!(nn::infer_shape(&layers, &[z]).unwrap(), shape.to_vec());
        }
        assert!(generator_layers("mnist", 10).is_err());
    }

    #[test]
    fn output_shape_and_range() {
        let g = build_generator("synth10", 16, 0).unwrap();
        let z = Tensor::new(&[3, 16], (0..48).map(|i| (i as f64 * 0.37).sin()).collect());
        let x = g.generate(&z).unwrap();
        assert_eq!(x.shape(), &[3, 1, 16, 16]);
        // Fresh final norm with unit running stats maps tanh output to itself.
        assert!(x.data().iter().all(|v| v.abs() <= 1.0 + 1e-4));
        assert!(g.generate(&Tensor::zeros(&[3, 15])).is_err());
    }
}
