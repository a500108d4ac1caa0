//! The full set of learnable state: decoder weights, queries, and the class
//! prototype bank.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::{decoder_forward_on, is_weight_matrix, DecoderParams, LayerWeights};
use crate::error::{Error, Result};
use crate::prototypes::{init_queries_with, ClassPrototypeBank, QueryMatrix};
use crate::tensor::{Real, Tensor};

pub const QUERIES: &str = "queries";
pub const CLASS_PROTOTYPES: &str = "class_prototypes";

#[derive(Clone, Debug, PartialEq)]
pub struct ComfeModel<T: Real = f32> {
    pub config: ModelConfig,
    pub decoder: DecoderParams<T>,
    pub queries: QueryMatrix<T>,
    pub bank: ClassPrototypeBank<T>,
}

/// Tape handles for every model tensor.
pub struct ModelVars {
    pub layers: Vec<LayerWeights<Var>>,
    pub queries: Var,
    pub class_prototypes: Var,
    pub phi: Var,
}

/// Per-layer decoder output for one view of one image.
pub struct ViewForward {
    pub z_hat: Var,
    /// Raw image prototypes after each decoder layer.
    pub prototypes: Vec<Var>,
}

impl ComfeModel {
    /// Xavier decoder, standard-normal queries, class prototypes uniform on
    /// the sphere. Draw order: decoder, queries, prototypes.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let decoder = DecoderParams::init(rng, &config.decoder())?;
        let queries = init_queries_with(rng, config.n_prototypes, config.dim)?;
        let bank = ClassPrototypeBank::init(
            rng,
            config.classes,
            config.per_class,
            config.background_prototypes(),
            config.alpha,
            config.dim,
        )?;
        Ok(ComfeModel {
            config,
            decoder,
            queries,
            bank,
        })
    }
}

impl<T: Real> ComfeModel<T> {
    pub fn cast<U: Real>(&self) -> ComfeModel<U> {
        ComfeModel {
            config: self.config.clone(),
            decoder: self.decoder.cast(),
            queries: self.queries.cast(),
            bank: self.bank.cast(),
        }
    }

    /// Every learnable tensor in canonical order: decoder layers, queries,
    /// class prototypes.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.decoder.named();
        out.push((QUERIES.to_string(), &self.queries.q));
        out.push((CLASS_PROTOTYPES.to_string(), &self.bank.prototypes));
        out
    }

    /// Same order as [`ComfeModel::named_params`].
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        self.decoder.for_each_mut(&mut f);
        f(QUERIES, &mut self.queries.q);
        f(CLASS_PROTOTYPES, &mut self.bank.prototypes);
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Decoupled weight decay applies to decoder projection matrices only.
    pub fn decays(name: &str) -> bool {
        name.starts_with("decoder.") && is_weight_matrix(name)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.decoder.check_shapes(&self.config.decoder())?;
        let d = self.config.dim;
        if self.queries.q.dims2() != (self.config.n_prototypes, d) {
            return Err(Error::dim("queries", self.queries.q.shape(), &[self.config.n_prototypes, d]));
        }
        let rows = self.config.per_class * self.config.classes + self.config.background_prototypes();
        if self.bank.prototypes.dims2() != (rows, d) {
            return Err(Error::dim("class prototypes", self.bank.prototypes.shape(), &[rows, d]));
        }
        for (name, t) in self.named_params() {
            if !t.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let layers = self.decoder.register(tape, trainable);
        let (queries, class_prototypes) = if trainable {
            (tape.param(self.queries.q.clone()), tape.param(self.bank.prototypes.clone()))
        } else {
            (
                tape.constant(self.queries.q.clone()),
                tape.constant(self.bank.prototypes.clone()),
            )
        };
        let phi = tape.constant(self.bank.phi_as());
        ModelVars {
            layers,
            queries,
            class_prototypes,
            phi,
        }
    }

    /// Vars in [`ComfeModel::named_params`] order.
    pub fn param_vars(vars: &ModelVars) -> Vec<Var> {
        let mut out: Vec<Var> = vars
            .layers
            .iter()
            .flat_map(|l| l.entries().into_iter().map(|(_, v)| *v))
            .collect();
        out.push(vars.queries);
        out.push(vars.class_prototypes);
        out
    }

    /// Normalizes the patches and runs the decoder on them, so every output
    /// is invariant to rescaling `z`.
    pub fn forward_view<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        z: &Tensor<T>,
        rng: Option<&mut R>,
    ) -> Result<ViewForward> {
        if z.cols() != self.config.dim {
            return Err(Error::dim("patch embeddings", z.shape(), &[z.rows(), self.config.dim]));
        }
        let zv = tape.constant(z.clone());
        let z_hat = tape.l2_normalize_rows(zv)?;
        let prototypes = decoder_forward_on(tape, z_hat, vars.queries, &vars.layers, &self.config.decoder(), rng)?;
        Ok(ViewForward { z_hat, prototypes })
    }
}
