//! The model: four factor encoders, two outcome heads, a treatment
//! classifier, and a reconstruction decoder.
//!
//! Encoders all read the full covariate vector. The outcome heads read the
//! concatenated confounding and adjustment embeddings, the classifier reads
//! instrumental plus confounding, and the decoder reads all four embeddings
//! and maps back to covariate space. Per-feature weight contributions
//! (`wbar`) are the row-wise average of absolute values of the product of a
//! network's layer weight matrices; they drive both the orthogonality loss
//! and the identification analysis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{scalar, Graph, NodeId};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Identity,
    Sigmoid,
}

/// Shape of one multilayer perceptron: ELU on every layer except the last,
/// which applies `final_activation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Hidden widths followed by the output width.
    pub widths: Vec<usize>,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, widths: Vec<usize>, final_activation: FinalActivation) -> Self {
        MlpSpec {
            input_dim,
            widths,
            final_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidNetworkSpec("input_dim must be positive".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::InvalidNetworkSpec("at least one layer".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidNetworkSpec("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated: non-empty")
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        let mut fan_in = self.input_dim;
        for &w in &self.widths {
            count += fan_in * w + w;
            fan_in = w;
        }
        count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`, row-major.
    pub weight: Tensor,
    /// `1 x fan_out`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Fan-in-scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases. Draw order is layer-by-layer, row-major, so a fixed RNG
    /// stream reproduces parameters bit for bit.
    fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input_dim;
        for &fan_out in &spec.widths {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight =
                Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
            let bias = Tensor::zeros(1, fan_out);
            layers.push(Layer { weight, bias });
            fan_in = fan_out;
        }
        Ok(Mlp { spec, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Forward pass on plain tensors (no tape). Used for prediction and
    /// evaluation; must agree with the graph forward exactly.
    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = matmul(&h, &layer.weight);
            for i in 0..z.rows() {
                for (zv, &bv) in z.row_mut(i).iter_mut().zip(layer.bias.row(0)) {
                    *zv += bv;
                }
            }
            h = if li < last {
                z.map(scalar::elu)
            } else {
                match self.spec.final_activation {
                    FinalActivation::Identity => z,
                    FinalActivation::Sigmoid => z.map(scalar::sigmoid),
                }
            };
        }
        h
    }

    fn forward_graph(&self, g: &mut Graph, ids: &[(NodeId, NodeId)], x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (li, &(w, b)) in ids.iter().enumerate() {
            let z = g.affine(h, w, b)?;
            h = if li < last {
                g.elu(z)?
            } else {
                match self.spec.final_activation {
                    FinalActivation::Identity => z,
                    FinalActivation::Sigmoid => g.sigmoid(z)?,
                }
            };
        }
        Ok(h)
    }

    /// Product of layer weight matrices (`input_dim x output_dim`).
    fn weight_product(&self) -> Tensor {
        let mut prod = self.layers[0].weight.clone();
        for layer in &self.layers[1..] {
            prod = matmul(&prod, &layer.weight);
        }
        prod
    }
}

/// The four factor encoders plus all downstream heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorNetworks {
    pub encoder_gamma: Mlp,
    pub encoder_delta: Mlp,
    pub encoder_upsilon: Mlp,
    pub encoder_omega: Mlp,
    pub head_y0: Mlp,
    pub head_y1: Mlp,
    pub head_treat: Mlp,
    pub decoder: Mlp,
}

pub const NETWORK_NAMES: [&str; 8] = [
    "encoder_gamma",
    "encoder_delta",
    "encoder_upsilon",
    "encoder_omega",
    "head_y0",
    "head_y1",
    "head_treat",
    "decoder",
];

/// Shape description used to build [`FactorNetworks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Covariate dimension K shared by all encoders and the decoder output.
    pub covariate_dim: usize,
    /// Hidden and output width of every encoder.
    pub latent_dim: usize,
    pub encoder_layers: usize,
    /// Hidden width of the outcome heads, classifier, and decoder.
    pub head_hidden: usize,
    pub head_layers: usize,
}

impl NetworkShape {
    pub fn validate(&self) -> Result<()> {
        if self.covariate_dim == 0
            || self.latent_dim == 0
            || self.encoder_layers == 0
            || self.head_hidden == 0
            || self.head_layers == 0
        {
            return Err(Error::InvalidNetworkSpec(
                "all network shape fields must be positive".into(),
            ));
        }
        Ok(())
    }

    fn encoder_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.covariate_dim,
            vec![self.latent_dim; self.encoder_layers],
            FinalActivation::Identity,
        )
    }

    fn head_spec(&self, input_dim: usize, output_dim: usize, act: FinalActivation) -> MlpSpec {
        let mut widths = vec![self.head_hidden; self.head_layers - 1];
        widths.push(output_dim);
        MlpSpec::new(input_dim, widths, act)
    }
}

impl FactorNetworks {
    /// Deterministic initialization for a fixed seed.
    pub fn init(shape: &NetworkShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = shape.latent_dim;
        let enc = shape.encoder_spec();
        let nets = FactorNetworks {
            encoder_gamma: Mlp::init(enc.clone(), &mut rng)?,
            encoder_delta: Mlp::init(enc.clone(), &mut rng)?,
            encoder_upsilon: Mlp::init(enc.clone(), &mut rng)?,
            encoder_omega: Mlp::init(enc, &mut rng)?,
            head_y0: Mlp::init(
                shape.head_spec(2 * latent, 1, FinalActivation::Identity),
                &mut rng,
            )?,
            head_y1: Mlp::init(
                shape.head_spec(2 * latent, 1, FinalActivation::Identity),
                &mut rng,
            )?,
            head_treat: Mlp::init(
                shape.head_spec(2 * latent, 1, FinalActivation::Sigmoid),
                &mut rng,
            )?,
            decoder: Mlp::init(
                shape.head_spec(4 * latent, shape.covariate_dim, FinalActivation::Identity),
                &mut rng,
            )?,
        };
        Ok(nets)
    }

    pub fn covariate_dim(&self) -> usize {
        self.encoder_gamma.spec.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder_gamma.spec.output_dim()
    }

    fn nets(&self) -> [&Mlp; 8] {
        [
            &self.encoder_gamma,
            &self.encoder_delta,
            &self.encoder_upsilon,
            &self.encoder_omega,
            &self.head_y0,
            &self.head_y1,
            &self.head_treat,
            &self.decoder,
        ]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 8] {
        [
            &mut self.encoder_gamma,
            &mut self.encoder_delta,
            &mut self.encoder_upsilon,
            &mut self.encoder_omega,
            &mut self.head_y0,
            &mut self.head_y1,
            &mut self.head_treat,
            &mut self.decoder,
        ]
    }

    /// All parameter tensors in canonical order: networks in
    /// [`NETWORK_NAMES`] order, each layer's weight then bias. Gradients,
    /// optimizer state, and tape bindings all share this layout.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for net in self.nets() {
            for layer in &net.layers {
                out.push(&layer.weight);
                out.push(&layer.bias);
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for net in self.nets_mut() {
            for layer in &mut net.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// Per-feature contribution vectors of the four encoders (plain path).
    pub fn weight_contribution(&self) -> WeightContribution {
        WeightContribution {
            gamma: wbar_plain(&self.encoder_gamma),
            delta: wbar_plain(&self.encoder_delta),
            upsilon: wbar_plain(&self.encoder_upsilon),
            omega: wbar_plain(&self.encoder_omega),
        }
    }
}

/// Row-wise average of absolute values of the product of an encoder's layer
/// weight matrices. Entry `j` measures how much covariate `j` feeds that
/// encoder's embedding; biases carry no per-feature signal and are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightContribution {
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub omega: Vec<f64>,
}

impl WeightContribution {
    pub fn by_name(&self, name: &str) -> &[f64] {
        match name {
            "gamma" => &self.gamma,
            "delta" => &self.delta,
            "upsilon" => &self.upsilon,
            "omega" => &self.omega,
            other => panic!("unknown encoder {other}"),
        }
    }
}

fn wbar_plain(net: &Mlp) -> Vec<f64> {
    let prod = net.weight_product();
    let m = prod.cols() as f64;
    (0..prod.rows())
        .map(|i| prod.row(i).iter().map(|v| v.abs()).sum::<f64>() / m)
        .collect()
}

// ---- tape construction ----

/// Node ids of every parameter bound onto a graph, in canonical order
/// (flat: weight, bias per layer, networks in [`NETWORK_NAMES`] order).
pub struct TapeBinding {
    per_net: Vec<Vec<(NodeId, NodeId)>>,
    flat: Vec<NodeId>,
}

impl TapeBinding {
    pub fn flat_ids(&self) -> &[NodeId] {
        &self.flat
    }

    fn net(&self, idx: usize) -> &[(NodeId, NodeId)] {
        &self.per_net[idx]
    }

    /// Gradients for every parameter after a backward pass, zeros where the
    /// loss does not reach.
    pub fn collect_grads(&self, g: &Graph) -> Vec<Tensor> {
        self.flat.iter().map(|&id| g.grad_or_zeros(id)).collect()
    }

    /// Weight (not bias) nodes of the two outcome heads, the treatment
    /// classifier, and the decoder — the four networks the objective's
    /// regularization term names.
    pub fn head_weight_ids(&self) -> Vec<NodeId> {
        self.per_net[4..8]
            .iter()
            .flat_map(|layers| layers.iter().map(|&(w, _)| w))
            .collect()
    }
}

/// Insert every parameter of `nets` as a tape parameter node.
pub fn bind_params(g: &mut Graph, nets: &FactorNetworks) -> Result<TapeBinding> {
    let mut per_net = Vec::with_capacity(8);
    let mut flat = Vec::new();
    for net in nets.nets() {
        let mut ids = Vec::with_capacity(net.layers.len());
        for layer in &net.layers {
            let w = g.param(layer.weight.clone())?;
            let b = g.param(layer.bias.clone())?;
            ids.push((w, b));
            flat.push(w);
            flat.push(b);
        }
        per_net.push(ids);
    }
    Ok(TapeBinding { per_net, flat })
}

/// Everything one joint forward pass produces, as tape nodes. All outputs
/// live on one shared graph so a single backward covers the whole objective.
pub struct ForwardOutputs {
    pub gamma: NodeId,
    pub delta: NodeId,
    pub upsilon: NodeId,
    pub omega: NodeId,
    pub y0_hat: NodeId,
    pub y1_hat: NodeId,
    pub t_hat: NodeId,
    pub x_recon: NodeId,
}

pub fn forward_all(
    g: &mut Graph,
    nets: &FactorNetworks,
    binding: &TapeBinding,
    x: NodeId,
) -> Result<ForwardOutputs> {
    if g.value(x).cols() != nets.covariate_dim() {
        return Err(Error::SchemaMismatch(format!(
            "batch has {} columns, networks expect {}",
            g.value(x).cols(),
            nets.covariate_dim()
        )));
    }
    let gamma = nets.encoder_gamma.forward_graph(g, binding.net(0), x)?;
    let delta = nets.encoder_delta.forward_graph(g, binding.net(1), x)?;
    let upsilon = nets.encoder_upsilon.forward_graph(g, binding.net(2), x)?;
    let omega = nets.encoder_omega.forward_graph(g, binding.net(3), x)?;

    let outcome_in = g.concat_cols(&[delta, upsilon])?;
    let y0_hat = nets.head_y0.forward_graph(g, binding.net(4), outcome_in)?;
    let y1_hat = nets.head_y1.forward_graph(g, binding.net(5), outcome_in)?;

    let treat_in = g.concat_cols(&[gamma, delta])?;
    let t_hat = nets.head_treat.forward_graph(g, binding.net(6), treat_in)?;

    let recon_in = g.concat_cols(&[gamma, delta, upsilon, omega])?;
    let x_recon = nets.decoder.forward_graph(g, binding.net(7), recon_in)?;

    Ok(ForwardOutputs {
        gamma,
        delta,
        upsilon,
        omega,
        y0_hat,
        y1_hat,
        t_hat,
        x_recon,
    })
}

/// Encoder index within the binding: 0 = gamma .. 3 = omega.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Gamma = 0,
    Delta = 1,
    Upsilon = 2,
    Omega = 3,
}

/// Build the `K x 1` weight-contribution vector of one encoder on the tape,
/// differentiable back to every layer weight.
pub fn wbar_node(
    g: &mut Graph,
    binding: &TapeBinding,
    encoder: EncoderKind,
) -> Result<NodeId> {
    let ids = binding.net(encoder as usize);
    let mut prod = ids[0].0;
    for &(w, _) in &ids[1..] {
        prod = g.matmul(prod, w)?;
    }
    let absd = g.abs(prod)?;
    g.mean_rows(absd)
}

// ---- JSON export / import ----

#[derive(Debug, Serialize, Deserialize)]
struct LayerJson {
    input_dim: usize,
    output_dim: usize,
    /// Row-major `input_dim x output_dim`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk parameter document: network name -> layer index -> row-major
/// weight and bias arrays. Field order is fixed so serialization is
/// byte-stable.
#[derive(Debug, Serialize, Deserialize)]
pub struct NetworksJson {
    encoder_gamma: Vec<LayerJson>,
    encoder_delta: Vec<LayerJson>,
    encoder_upsilon: Vec<LayerJson>,
    encoder_omega: Vec<LayerJson>,
    head_y0: Vec<LayerJson>,
    head_y1: Vec<LayerJson>,
    head_treat: Vec<LayerJson>,
    decoder: Vec<LayerJson>,
}

fn mlp_to_json(net: &Mlp) -> Vec<LayerJson> {
    net.layers
        .iter()
        .map(|l| LayerJson {
            input_dim: l.weight.rows(),
            output_dim: l.weight.cols(),
            weight: l.weight.data().to_vec(),
            bias: l.bias.data().to_vec(),
        })
        .collect()
}

fn mlp_from_json(layers: &[LayerJson], final_activation: FinalActivation) -> Result<Mlp> {
    if layers.is_empty() {
        return Err(Error::InvalidNetworkSpec("network with no layers".into()));
    }
    let mut built = Vec::with_capacity(layers.len());
    for l in layers {
        if l.weight.len() != l.input_dim * l.output_dim || l.bias.len() != l.output_dim {
            return Err(Error::InvalidNetworkSpec(format!(
                "layer arrays do not match dims {}x{}",
                l.input_dim, l.output_dim
            )));
        }
        built.push(Layer {
            weight: Tensor::from_vec(l.input_dim, l.output_dim, l.weight.clone()),
            bias: Tensor::from_vec(1, l.output_dim, l.bias.clone()),
        });
    }
    let spec = MlpSpec::new(
        layers[0].input_dim,
        layers.iter().map(|l| l.output_dim).collect(),
        final_activation,
    );
    Ok(Mlp {
        spec,
        layers: built,
    })
}

impl FactorNetworks {
    pub fn to_json(&self) -> NetworksJson {
        NetworksJson {
            encoder_gamma: mlp_to_json(&self.encoder_gamma),
            encoder_delta: mlp_to_json(&self.encoder_delta),
            encoder_upsilon: mlp_to_json(&self.encoder_upsilon),
            encoder_omega: mlp_to_json(&self.encoder_omega),
            head_y0: mlp_to_json(&self.head_y0),
            head_y1: mlp_to_json(&self.head_y1),
            head_treat: mlp_to_json(&self.head_treat),
            decoder: mlp_to_json(&self.decoder),
        }
    }

    pub fn from_json(doc: &NetworksJson) -> Result<Self> {
        Ok(FactorNetworks {
            encoder_gamma: mlp_from_json(&doc.encoder_gamma, FinalActivation::Identity)?,
            encoder_delta: mlp_from_json(&doc.encoder_delta, FinalActivation::Identity)?,
            encoder_upsilon: mlp_from_json(&doc.encoder_upsilon, FinalActivation::Identity)?,
            encoder_omega: mlp_from_json(&doc.encoder_omega, FinalActivation::Identity)?,
            head_y0: mlp_from_json(&doc.head_y0, FinalActivation::Identity)?,
            head_y1: mlp_from_json(&doc.head_y1, FinalActivation::Identity)?,
            head_treat: mlp_from_json(&doc.head_treat, FinalActivation::Sigmoid)?,
            decoder: mlp_from_json(&doc.decoder, FinalActivation::Identity)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> NetworkShape {
        NetworkShape {
            covariate_dim: 6,
            latent_dim: 3,
            encoder_layers: 3,
            head_hidden: 4,
            head_layers: 3,
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = FactorNetworks::init(&small_shape(), 9).unwrap();
        let b = FactorNetworks::init(&small_shape(), 9).unwrap();
        assert_eq!(a, b);
        let c = FactorNetworks::init(&small_shape(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn encoder_param_count_example() {
        // widths [10, 10, 10], K = 24 -> 24*10+10 + 2*(10*10+10) = 470
        let shape = NetworkShape {
            covariate_dim: 24,
            latent_dim: 10,
            encoder_layers: 3,
            head_hidden: 4,
            head_layers: 3,
        };
        let nets = FactorNetworks::init(&shape, 0).unwrap();
        assert_eq!(nets.encoder_gamma.param_count(), 470);
    }

    #[test]
    fn biases_zero_at_init() {
        let nets = FactorNetworks::init(&small_shape(), 3).unwrap();
        for net in nets.nets() {
            for layer in &net.layers {
                assert!(layer.bias.data().iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn forward_all_shapes_and_zero_weight_cases() {
        let shape = small_shape();
        let mut nets = FactorNetworks::init(&shape, 1).unwrap();
        // Zero every parameter: sigmoid head must output exactly 0.5 and the
        // decoder exactly its (zero) bias.
        for p in nets.param_tensors_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let n = 5;
        let x = Tensor::from_fn(n, shape.covariate_dim, |i, j| (i + j) as f64 * 0.1);

        let mut g = Graph::new();
        let binding = bind_params(&mut g, &nets).unwrap();
        let xid = g.input(x).unwrap();
        let outs = forward_all(&mut g, &nets, &binding, xid).unwrap();

        assert_eq!(g.value(outs.gamma).shape(), [n, shape.latent_dim]);
        assert_eq!(g.value(outs.delta).shape(), [n, shape.latent_dim]);
        assert_eq!(g.value(outs.upsilon).shape(), [n, shape.latent_dim]);
        assert_eq!(g.value(outs.omega).shape(), [n, shape.latent_dim]);
        assert_eq!(g.value(outs.y0_hat).shape(), [n, 1]);
        assert_eq!(g.value(outs.y1_hat).shape(), [n, 1]);
        assert_eq!(g.value(outs.t_hat).shape(), [n, 1]);
        assert_eq!(g.value(outs.x_recon).shape(), [n, shape.covariate_dim]);

        assert!(g.value(outs.t_hat).data().iter().all(|&p| p == 0.5));
        assert!(g.value(outs.x_recon).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn t_hat_strictly_inside_unit_interval() {
        let shape = small_shape();
        let nets = FactorNetworks::init(&shape, 11).unwrap();
        let x = Tensor::from_fn(8, shape.covariate_dim, |i, j| ((i * 7 + j) % 5) as f64 - 2.0);
        let mut g = Graph::new();
        let binding = bind_params(&mut g, &nets).unwrap();
        let xid = g.input(x).unwrap();
        let outs = forward_all(&mut g, &nets, &binding, xid).unwrap();
        assert!(g
            .value(outs.t_hat)
            .data()
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn plain_forward_matches_graph_forward() {
        let shape = small_shape();
        let nets = FactorNetworks::init(&shape, 5).unwrap();
        let x = Tensor::from_fn(4, shape.covariate_dim, |i, j| {
            ((i as f64) - 1.5) * 0.3 + (j as f64) * 0.05
        });

        let mut g = Graph::new();
        let binding = bind_params(&mut g, &nets).unwrap();
        let xid = g.input(x.clone()).unwrap();
        let outs = forward_all(&mut g, &nets, &binding, xid).unwrap();

        let gamma_plain = nets.encoder_gamma.forward_plain(&x);
        assert_eq!(g.value(outs.gamma), &gamma_plain);

        let delta = nets.encoder_delta.forward_plain(&x);
        let upsilon = nets.encoder_upsilon.forward_plain(&x);
        let mut cat = Tensor::zeros(4, delta.cols() + upsilon.cols());
        for i in 0..4 {
            cat.row_mut(i)[..delta.cols()].copy_from_slice(delta.row(i));
            cat.row_mut(i)[delta.cols()..].copy_from_slice(upsilon.row(i));
        }
        let y0_plain = nets.head_y0.forward_plain(&cat);
        assert_eq!(g.value(outs.y0_hat), &y0_plain);
    }

    #[test]
    fn forward_row_independence() {
        let shape = small_shape();
        let nets = FactorNetworks::init(&shape, 13).unwrap();
        let x = Tensor::from_fn(6, shape.covariate_dim, |i, j| ((i * j) as f64).sin());
        let full = nets.encoder_delta.forward_plain(&x);
        for i in 0..6 {
            let single = Tensor::from_vec(1, shape.covariate_dim, x.row(i).to_vec());
            let one = nets.encoder_delta.forward_plain(&single);
            assert_eq!(one.row(0), full.row(i));
        }
    }

    #[test]
    fn wbar_identity_single_layer() {
        let d = 4;
        let mut nets = FactorNetworks::init(
            &NetworkShape {
                covariate_dim: d,
                latent_dim: d,
                encoder_layers: 1,
                head_hidden: 3,
                head_layers: 2,
            },
            0,
        )
        .unwrap();
        nets.encoder_gamma.layers[0].weight = Tensor::identity(d);
        let wc = nets.weight_contribution();
        for &v in &wc.gamma {
            assert!((v - 1.0 / d as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn wbar_two_scaled_identities() {
        let d = 3;
        let mut nets = FactorNetworks::init(
            &NetworkShape {
                covariate_dim: d,
                latent_dim: d,
                encoder_layers: 2,
                head_hidden: 3,
                head_layers: 2,
            },
            0,
        )
        .unwrap();
        nets.encoder_delta.layers[0].weight = Tensor::identity(d).map(|v| 2.0 * v);
        nets.encoder_delta.layers[1].weight = Tensor::identity(d).map(|v| 3.0 * v);
        let wc = nets.weight_contribution();
        for &v in &wc.delta {
            assert!((v - 6.0 / d as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn wbar_zero_first_layer_column_kills_feature() {
        let shape = small_shape();
        let mut nets = FactorNetworks::init(&shape, 21).unwrap();
        // Zero the row of layer-0 weights read from covariate 2.
        let w = &mut nets.encoder_upsilon.layers[0].weight;
        for j in 0..w.cols() {
            w.set(2, j, 0.0);
        }
        let wc = nets.weight_contribution();
        assert_eq!(wc.upsilon[2], 0.0);
        assert!(wc.upsilon.iter().enumerate().all(|(j, &v)| v >= 0.0 || j == 2));
    }

    #[test]
    fn wbar_scales_linearly_with_layer_scale() {
        let shape = small_shape();
        let nets = FactorNetworks::init(&shape, 33).unwrap();
        let base = nets.weight_contribution();
        let mut scaled = nets.clone();
        let c = 2.5;
        for v in scaled.encoder_gamma.layers[1].weight.data_mut() {
            *v *= c;
        }
        let after = scaled.weight_contribution();
        for (b, a) in base.gamma.iter().zip(&after.gamma) {
            assert!((a - c * b).abs() < 1e-12);
        }
        // Other encoders untouched.
        assert_eq!(base.delta, after.delta);
    }

    #[test]
    fn wbar_graph_matches_plain() {
        let shape = small_shape();
        let nets = FactorNetworks::init(&shape, 17).unwrap();
        let plain = nets.weight_contribution();

        let mut g = Graph::new();
        let binding = bind_params(&mut g, &nets).unwrap();
        for (kind, expect) in [
            (EncoderKind::Gamma, &plain.gamma),
            (EncoderKind::Delta, &plain.delta),
            (EncoderKind::Upsilon, &plain.upsilon),
            (EncoderKind::Omega, &plain.omega),
        ] {
            let id = wbar_node(&mut g, &binding, kind).unwrap();
            let v = g.value(id);
            assert_eq!(v.shape(), [shape.covariate_dim, 1]);
            for (i, &e) in expect.iter().enumerate() {
                assert!((v.get(i, 0) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_parameters() {
        let nets = FactorNetworks::init(&small_shape(), 23).unwrap();
        let doc = nets.to_json();
        let text = serde_json::to_string(&doc).unwrap();
        let parsed: NetworksJson = serde_json::from_str(&text).unwrap();
        let back = FactorNetworks::from_json(&parsed).unwrap();
        assert_eq!(nets, back);
    }

    #[test]
    fn invalid_shape_rejected() {
        let mut shape = small_shape();
        shape.latent_dim = 0;
        assert!(FactorNetworks::init(&shape, 0).is_err());
    }
}
