//! Random networks and dendrite banks for property tests and gradient checks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::activation::Activation;
use crate::dendrites::DendriteBank;
use crate::error::Result;
use crate::network::{LayerSpec, Network, NetworkSpec};
use crate::seeds::rng_for;
use crate::tensor::Tensor;

/// A network with 2 to 4 dense/conv layers. Conv stacks (kernels 2 or 3,
/// stride 1 or 2, padding 0 or 1, optional 2x2 pool) are used on odd seeds.
/// `first_activation` pins the activation of the first layer so callers can
/// cover every kind.
pub fn random_spec(seed: u64, first_activation: Activation) -> NetworkSpec {
    let mut rng = rng_for(seed, &[0x5eed]);
    let hosts = rng.gen_range(2..=4);
    let pick = |rng: &mut rand_chacha::ChaCha8Rng| *Activation::ALL.choose(rng).unwrap();
    let mut layers = Vec::new();
    let input_shape;
    let mut remaining = hosts;
    if seed % 2 == 1 {
        input_shape = vec![2, 6, 6];
        let convs = rng.gen_range(1..hosts);
        let mut side = 6usize;
        for i in 0..convs {
            let act = if i == 0 { first_activation } else { pick(&mut rng) };
            let padding = rng.gen_range(0..=1);
            let kernel = rng.gen_range(2..=3).min(side + 2 * padding);
            let stride = if i == 0 && rng.gen_bool(0.3) { 2 } else { 1 };
            let mut l = LayerSpec::conv2d(rng.gen_range(1..=3), kernel, act);
            if let crate::network::LayerKind::Conv2d { stride: s, padding: p, .. } = &mut l.kind {
                *p = padding;
                *s = stride;
            }
            layers.push(l);
            side = (side + 2 * padding - kernel) / stride + 1;
            if i == 0 && side >= 2 && rng.gen_bool(0.5) {
                layers.push(LayerSpec::maxpool(2));
                side /= 2;
            }
        }
        layers.push(LayerSpec::flatten());
        remaining -= convs;
    } else {
        input_shape = vec![rng.gen_range(2..=5)];
    }
    for i in 0..remaining {
        let first = layers.is_empty();
        let act = if first { first_activation } else { pick(&mut rng) };
        let last = i + 1 == remaining;
        let width = if last { rng.gen_range(1..=3) } else { rng.gen_range(2..=4) };
        let mut l = LayerSpec::dense(width, act);
        if rng.gen_bool(0.2) {
            l = l.without_bias();
        }
        layers.push(l);
    }
    NetworkSpec { input_shape, layers }
}

/// Appends `generations` random dendrite banks to every host layer. Output
/// weights are nonzero so the dendrites matter.
pub fn add_random_dendrites(net: &mut Network, generations: usize, with_bias: bool, seed: u64) -> Result<()> {
    let mut rng = rng_for(seed, &[0xde4d]);
    for layer in net.host_layers() {
        for g in 0..generations {
            let h = net.host(layer).expect("host");
            let (n, k, d) = (h.neurons(), h.fan_in(), h.dendrites().len());
            let bound = 1.0 / (k as f64).sqrt();
            let mut draw = |shape: &[usize], b: f64| Tensor::from_fn(shape, |_| rng.gen_range(-b..=b));
            let input = draw(&[n, k], bound);
            let sibling = draw(&[n, d], 0.5);
            let bias = with_bias.then(|| draw(&[n], bound));
            let output = Tensor::from_fn(&[n], |_| {
                let m = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            let act = *Activation::ALL.choose(&mut rng).unwrap();
            net.push_dendrite_bank(layer, DendriteBank::new(input, sibling, bias, output, act, g + 1)?)?;
        }
    }
    Ok(())
}

/// A batch of inputs uniform in `[-1, 1]` shaped for `net`.
pub fn random_batch(net: &Network, batch: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[0xba7c]);
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}
