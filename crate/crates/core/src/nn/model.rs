//! Client models: an MLP backbone producing the embedding, a main head and
//! a chain of auxiliary heads, all linear on top of the embedding.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{MhdError, Result};
use crate::nn::matrix::{affine, matmul_dy_w, outer_accumulate};
use crate::nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Shape of a client model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub num_aux_heads: usize,
}

impl Architecture {
    pub fn num_heads(&self) -> usize {
        1 + self.num_aux_heads
    }

    pub fn num_params(&self) -> usize {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        let backbone: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        backbone + self.num_heads() * (self.embedding_dim * self.num_classes + self.num_classes)
    }
}

/// A dense affine layer with weight `[out × in]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Matrix::zeros(out_dim, in_dim), bias: vec![0.0; out_dim] }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let data = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self { weight: Matrix::from_vec(out_dim, in_dim, data).expect("sized"), bias: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        affine(x, &self.weight, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

impl Backbone {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() != self.activations.len() {
            return Err(MhdError::Shape("backbone needs one activation tag per layer".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(MhdError::Shape(format!(
                    "backbone layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Backbone plus main head plus `m` auxiliary heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub client_id: usize,
    pub backbone: Backbone,
    pub main_head: Dense,
    pub aux_heads: Vec<Dense>,
}

/// Outputs of a forward pass together with the activations needed by
/// [`ClientModel::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    layer_inputs: Vec<Matrix>,
    pre_acts: Vec<Matrix>,
    pub embeddings: Matrix,
    /// Main head first, then auxiliary heads in chain order.
    pub logits: Vec<Matrix>,
}

impl Forward {
    pub fn batch_size(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Parameter gradients laid out in [`ClientModel::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ClientModel) -> Self {
        Self { tensors: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn accumulate(&mut self, other: &ModelGrads) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(MhdError::Shape("gradient tensor count differs".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.len() != b.len() {
                return Err(MhdError::Shape("gradient tensor length differs".into()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ClientModel {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, client_id: usize, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.embedding_dim == 0 || arch.num_classes < 2 {
            return Err(MhdError::config("model", "input_dim and embedding_dim must be positive and num_classes >= 2"));
        }
        if arch.hidden.contains(&0) {
            return Err(MhdError::config("model.hidden", "hidden widths must be positive"));
        }
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.embedding_dim);
        let layers: Vec<Dense> = dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        let mut activations = vec![Activation::Relu; layers.len()];
        *activations.last_mut().expect("at least one layer") = Activation::Identity;
        let main_head = Dense::glorot(arch.embedding_dim, arch.num_classes, rng);
        let aux_heads =
            (0..arch.num_aux_heads).map(|_| Dense::glorot(arch.embedding_dim, arch.num_classes, rng)).collect();
        Ok(Self { client_id, backbone: Backbone { layers, activations }, main_head, aux_heads })
    }

    pub fn architecture(&self) -> Architecture {
        let layers = &self.backbone.layers;
        Architecture {
            input_dim: self.backbone.input_dim(),
            hidden: layers[..layers.len() - 1].iter().map(Dense::out_dim).collect(),
            embedding_dim: self.embedding_dim(),
            num_classes: self.num_classes(),
            num_aux_heads: self.aux_heads.len(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.main_head.out_dim()
    }

    pub fn num_heads(&self) -> usize {
        1 + self.aux_heads.len()
    }

    /// Head by rank: 0 is the main head, `k ≥ 1` the k-th auxiliary head.
    pub fn head(&self, rank: usize) -> Option<&Dense> {
        if rank == 0 {
            Some(&self.main_head)
        } else {
            self.aux_heads.get(rank - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let e = self.embedding_dim();
        let d = self.num_classes();
        for (r, head) in std::iter::once(&self.main_head).chain(&self.aux_heads).enumerate() {
            if head.in_dim() != e || head.out_dim() != d || head.bias.len() != d {
                return Err(MhdError::Shape(format!(
                    "head {r} is {}x{}, expected {d}x{e}",
                    head.out_dim(),
                    head.in_dim()
                )));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(MhdError::Input("non-finite parameter".into()));
        }
        Ok(())
    }

    fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone.layers.iter().chain(std::iter::once(&self.main_head)).chain(&self.aux_heads)
    }

    fn dense_layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.backbone.layers.iter_mut().chain(std::iter::once(&mut self.main_head)).chain(self.aux_heads.iter_mut())
    }

    /// Parameter tensors in canonical order: each backbone layer's weight and
    /// bias, then the main head, then the auxiliary heads.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.dense_layers().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.dense_layers_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    /// Names and shapes matching [`Self::tensors`].
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |prefix: String, l: &Dense| {
            out.push((format!("{prefix}.weight"), vec![l.out_dim(), l.in_dim()]));
            out.push((format!("{prefix}.bias"), vec![l.out_dim()]));
        };
        for (i, l) in self.backbone.layers.iter().enumerate() {
            push(format!("backbone.{i}"), l);
        }
        push("head.main".into(), &self.main_head);
        for (k, l) in self.aux_heads.iter().enumerate() {
            push(format!("head.aux{}", k + 1), l);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Forward> {
        if batch.cols() != self.backbone.input_dim() {
            return Err(MhdError::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.backbone.input_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.backbone.layers.len());
        let mut pre_acts = Vec::with_capacity(self.backbone.layers.len());
        let mut h = batch.clone();
        for (layer, act) in self.backbone.layers.iter().zip(&self.backbone.activations) {
            let z = layer.forward(&h)?;
            let next = match act {
                Activation::Relu => {
                    let mut a = z.clone();
                    a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                    a
                }
                Activation::Identity => z.clone(),
            };
            layer_inputs.push(std::mem::replace(&mut h, next));
            pre_acts.push(z);
        }
        let embeddings = h;
        let logits = std::iter::once(&self.main_head)
            .chain(&self.aux_heads)
            .map(|head| head.forward(&embeddings))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward { layer_inputs, pre_acts, embeddings, logits })
    }

    /// Backpropagates per-head logit gradients and a direct embedding
    /// gradient. A `None` head gradient means the head receives no signal.
    pub fn backward(
        &self,
        fwd: &Forward,
        head_grads: &[Option<&Matrix>],
        emb_grad: Option<&Matrix>,
    ) -> Result<ModelGrads> {
        let b = fwd.batch_size();
        let e = self.embedding_dim();
        if head_grads.len() != self.num_heads() {
            return Err(MhdError::Shape(format!("{} head gradients for {} heads", head_grads.len(), self.num_heads())));
        }
        let mut d_emb = match emb_grad {
            Some(g) if g.shape() != (b, e) => {
                return Err(MhdError::Shape(format!("embedding gradient {:?}, expected {:?}", g.shape(), (b, e))))
            }
            Some(g) => g.clone(),
            None => Matrix::zeros(b, e),
        };

        let n_backbone = self.backbone.layers.len();
        let mut head_tensors = Vec::with_capacity(2 * self.num_heads());
        for (rank, grad) in head_grads.iter().enumerate() {
            let head = self.head(rank).expect("rank < num_heads");
            match grad {
                Some(g) => {
                    if g.shape() != (b, self.num_classes()) {
                        return Err(MhdError::Shape(format!(
                            "head {rank} gradient {:?}, expected {:?}",
                            g.shape(),
                            (b, self.num_classes())
                        )));
                    }
                    let (dw, db) = outer_accumulate(g, &fwd.embeddings)?;
                    d_emb.add_assign(&matmul_dy_w(g, &head.weight)?)?;
                    head_tensors.push(dw.into_vec());
                    head_tensors.push(db);
                }
                None => {
                    head_tensors.push(vec![0.0; head.weight.as_slice().len()]);
                    head_tensors.push(vec![0.0; head.bias.len()]);
                }
            }
        }

        let mut backbone_tensors = vec![Vec::new(); 2 * n_backbone];
        let mut upstream = d_emb;
        for l in (0..n_backbone).rev() {
            let layer = &self.backbone.layers[l];
            let mut dz = upstream;
            if self.backbone.activations[l] == Activation::Relu {
                for (g, &z) in dz.as_mut_slice().iter_mut().zip(fwd.pre_acts[l].as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (dw, db) = outer_accumulate(&dz, &fwd.layer_inputs[l])?;
            backbone_tensors[2 * l] = dw.into_vec();
            backbone_tensors[2 * l + 1] = db;
            upstream = if l > 0 { matmul_dy_w(&dz, &layer.weight)? } else { Matrix::zeros(0, 0) };
        }
        backbone_tensors.extend(head_tensors);
        Ok(ModelGrads { tensors: backbone_tensors })
    }

    /// Signs of every ReLU pre-activation on `batch`; used to detect when a
    /// finite-difference probe crosses a kink.
    pub fn relu_pattern(&self, batch: &Matrix) -> Result<Vec<bool>> {
        let fwd = self.forward(batch)?;
        Ok(fwd
            .pre_acts
            .iter()
            .zip(&self.backbone.activations)
            .filter(|(_, a)| **a == Activation::Relu)
            .flat_map(|(z, _)| z.as_slice().iter().map(|&v| v > 0.0))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture { input_dim: 3, hidden: vec![5], embedding_dim: 4, num_classes: 3, num_aux_heads: 2 }
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ClientModel::init(&arch(), 0, &mut rng).unwrap();
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        m.main_head.bias = vec![0.5, -1.0, 2.0];
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.0, 9.0]]).unwrap();
        let out = m.forward(&x).unwrap();
        for row in out.logits[0].iter_rows() {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn identity_backbone_and_head_pass_input_through() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = ClientModel {
            client_id: 0,
            backbone: Backbone {
                layers: vec![Dense { weight: eye.clone(), bias: vec![0.0; 2] }],
                activations: vec![Activation::Identity],
            },
            main_head: Dense { weight: eye, bias: vec![0.0; 2] },
            aux_heads: vec![],
        };
        let out = m.forward(&Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(out.logits[0].row(0), &[1.0, 0.0]);
        assert_eq!(out.logits.len(), 1);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ClientModel::init(&arch(), 0, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        let fwd = m.forward(&x).unwrap();
        let z = Matrix::zeros(1, 3);
        let g = m.backward(&fwd, &[Some(&z), None, None], None).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let w = Matrix::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.1]]).unwrap();
        let m = ClientModel {
            client_id: 0,
            backbone: Backbone {
                layers: vec![Dense { weight: w.clone(), bias: vec![0.0; 2] }],
                activations: vec![Activation::Identity],
            },
            main_head: Dense::zeros(2, 2),
            aux_heads: vec![],
        };
        let x = Matrix::from_rows(&[vec![2.0, -3.0]]).unwrap();
        let up = Matrix::from_rows(&[vec![0.7, -1.1]]).unwrap();
        let fwd = m.forward(&x).unwrap();
        let g = m.backward(&fwd, &[None], Some(&up)).unwrap();
        assert_eq!(g.tensors[0], vec![0.7 * 2.0, 0.7 * -3.0, -1.1 * 2.0, -1.1 * -3.0]);
        assert_eq!(g.tensors[1], vec![0.7, -1.1]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ClientModel::init(&arch(), 0, &mut rng).unwrap();
        assert!(matches!(m.forward(&Matrix::zeros(2, 4)), Err(MhdError::Shape(_))));
        let fwd = m.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(m.backward(&fwd, &[None, None], None).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ClientModel::init(&arch(), 0, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, 0.9, -1.7], vec![2.2, -0.1, 0.0]]).unwrap();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn param_count_matches_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = arch();
        let m = ClientModel::init(&a, 0, &mut rng).unwrap();
        assert_eq!(m.num_params(), a.num_params());
        assert_eq!(m.architecture(), a);
        assert_eq!(m.tensor_layout().len(), m.tensors().len());
        m.validate().unwrap();
    }
}
