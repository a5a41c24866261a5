//! Full network: stem, three hybrid stages with embeddings between them, and
//! a classification head.

use crate::blocks::{
    apply_ablation, conv_out_shape, timed, ConvBn, Embedding, Linear, Observer, StageGraph, StageParams, Stem,
};
use crate::config::{AblationFlags, VariantSpec};
use crate::error::{Error, Result};
use crate::kernels::{global_avg_pool, ConvSpec};
use crate::params::{Init, Initializer, ParamKind, ParamSource, StoreBinder};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: VariantSpec,
    pub ablation: AblationFlags,
    pub stem: Stem,
    pub stages: Vec<StageParams>,
    pub embeds: Vec<Embedding>,
    pub head: Linear,
    loaded: bool,
}

impl Model {
    /// Assembles a model. [`Init::Empty`] yields placeholders that refuse to
    /// run until weights are loaded with [`Model::from_store`].
    pub fn build(spec: VariantSpec, ablation: AblationFlags, init: Init) -> Result<Model> {
        let mut src = Initializer::new(init);
        let mut model = Self::assemble(spec, ablation, &mut src)?;
        model.loaded = init != Init::Empty;
        Ok(model)
    }

    /// Binds every tensor of `store`; missing, misshapen or leftover tensors
    /// are errors. Both raw and batch-norm-folded layouts are accepted.
    pub fn from_store(spec: VariantSpec, ablation: AblationFlags, store: &WeightStore) -> Result<Model> {
        let mut binder = StoreBinder::new(store);
        let mut model = Self::assemble(spec, ablation, &mut binder)?;
        binder.finish()?;
        model.loaded = true;
        Ok(model)
    }

    fn assemble(spec: VariantSpec, ablation: AblationFlags, src: &mut dyn ParamSource) -> Result<Model> {
        spec.validate()?;
        let stem = Stem::bind(src, &spec)?;
        let mut stages = Vec::with_capacity(3);
        let mut embeds = Vec::with_capacity(2);
        for s in 0..3 {
            let graph = apply_ablation(StageGraph::for_stage(&spec, s), ablation);
            stages.push(StageParams::bind(src, &spec, s, graph)?);
            if s < 2 {
                let (c_in, c_out) = (spec.stage_dims[s], spec.stage_dims[s + 1]);
                let name = format!("embed{}", s + 1);
                embeds.push(Embedding(ConvBn::bind(src, &name, c_in, c_out, ConvSpec::square(3, 2))?));
            }
        }
        let head = Linear {
            weight: src.take("head.linear.w", &[spec.num_classes, spec.stage_dims[2]], ParamKind::Weight)?,
            bias: Some(src.take("head.linear.b", &[spec.num_classes], ParamKind::Bias)?),
        };
        let model = Model {
            spec,
            ablation,
            stem,
            stages,
            embeds,
            head,
            loaded: false,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Propagates the input shape through the stage boundaries and checks
    /// each stage sees its configured width and extent.
    pub fn check_shapes(&self) -> Result<()> {
        let spec = &self.spec;
        let mut shape = [1, 3, spec.input_hw, spec.input_hw];
        for c in &self.stem.convs {
            shape = conv_out_shape(c, shape)?;
        }
        for (s, stage) in self.stages.iter().enumerate() {
            let expect = [1, spec.stage_dims[s], spec.stage_hw(s), spec.stage_hw(s)];
            if shape != expect {
                return Err(Error::shape("stage input", &shape, &expect));
            }
            shape = stage.out_shape(shape)?;
            if let Some(e) = self.embeds.get(s) {
                shape = conv_out_shape(&e.0, shape)?;
            }
        }
        Ok(())
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    /// All tensors under their canonical names, in forward order.
    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        self.stem.export(&mut store);
        for (s, stage) in self.stages.iter().enumerate() {
            stage.export(&format!("stage{}", s + 1), &mut store);
            if let Some(e) = self.embeds.get(s) {
                e.0.export(&format!("embed{}", s + 1), &mut store);
            }
        }
        store.insert("head.linear.w", self.head.weight.clone()).expect("unique");
        if let Some(b) = &self.head.bias {
            store.insert("head.linear.b", b.clone()).expect("unique");
        }
        store
    }

    /// Logits `[N, num_classes]` for images `[N, 3, H, W]`.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        self.forward_observed(img, &mut ())
    }

    /// Like [`Model::forward`], reporting every block boundary to `obs`.
    pub fn forward_observed(&self, img: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        if !self.loaded {
            return Err(Error::State("weights have not been loaded".into()));
        }
        let [n, c, h, w] = img.dims4("forward")?;
        let hw = self.spec.input_hw;
        if c != 3 || h != hw || w != hw {
            return Err(Error::shape("forward", img.shape(), &[n, 3, hw, hw]));
        }
        let (mut x, dt) = timed(|| self.stem.forward(img))?;
        obs.record("stem", &x, dt);
        for (s, stage) in self.stages.iter().enumerate() {
            x = stage.forward_observed(&x, &format!("stage{}", s + 1), obs)?;
            if let Some(e) = self.embeds.get(s) {
                let (y, dt) = timed(|| e.forward(&x))?;
                obs.record(&format!("embed{}", s + 1), &y, dt);
                x = y;
            }
        }
        let (logits, dt) = timed(|| self.head.forward(&global_avg_pool(&x)?))?;
        obs.record("head", &logits, dt);
        Ok(logits)
    }

    /// Learnable parameters; batch-norm running statistics are excluded.
    pub fn count_params(&self) -> usize {
        count_params(&self.to_store())
    }
}

/// Learnable elements of a store, skipping running mean and variance.
pub fn count_params(store: &WeightStore) -> usize {
    store
        .iter()
        .filter(|(n, _)| !ParamKind::of_name(n).is_statistic())
        .map(|(_, t)| t.numel())
        .sum()
}

/// The block a parameter name belongs to, matching the observer's names.
pub fn block_of(name: &str) -> &str {
    let mut dots = name.match_indices('.').map(|(i, _)| i);
    let first = dots.next().unwrap_or(name.len());
    if name.starts_with("stage") {
        &name[..dots.next().unwrap_or(name.len())]
    } else {
        &name[..first]
    }
}

/// Names of the observed block boundaries, in forward order.
pub fn block_names(spec: &VariantSpec) -> Vec<String> {
    let mut names = vec!["stem".to_string()];
    for s in 0..3 {
        let p = format!("stage{}", s + 1);
        names.extend((0..spec.invres_counts[s]).map(|k| format!("{p}.invres{k}")));
        names.push(format!("{p}.mixer"));
        names.extend((0..spec.mattn_counts[s]).map(|k| format!("{p}.mattn{k}")));
        names.push(format!("{p}.convt"));
        names.push(format!("{p}.fuse"));
        if s < 2 {
            names.push(format!("embed{}", s + 1));
        }
    }
    names.push("head".into());
    names
}
