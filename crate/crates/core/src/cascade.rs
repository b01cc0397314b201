//! Cascade assembly of pre-trained one-block encoders into deeper models:
//! a multi-block ViT classifier for downstream fine-tuning and a multi-block
//! MAE for reconstruction and server-side refinement.
//!
//! Pretrained blocks are copied bit-exactly from their source encoders; fresh
//! blocks use the same initialization scheme as pre-training, so the number
//! of pretrained blocks is the only varying factor in ablations.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::{
    apply_mask_zero, patchify, sample_mask, unpatchify, ImageBatch, MaskPlan,
    MaskSemantics, PatchSequence,
};
use crate::error::{Error, Result};
use crate::mae::{masked_recon_loss, LossMode, MaeDims, MaeParams};
use crate::nn::{
    argmax, block_bwd, block_fwd, layer_norm_bwd, layer_norm_fwd, linear_bwd, linear_fwd,
    softmax_cross_entropy, BlockCache, BlockParams, LayerNormParams,
};
use crate::optim::{AdamConfig, OptimizerState};
use crate::param::{init_trunc_normal, NamedParams};
use crate::rng::RngStream;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Cascade specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CascadeSource {
    /// Ordered lineage ids, one per pretrained slot.
    Lineages(Vec<usize>),
    /// The same lineage copied into every pretrained slot.
    Replicate(usize),
}

#[derive(Debug, Clone)]
pub struct CascadeSpec {
    pub depth: usize,
    pub pretrained: usize,
    pub source: CascadeSource,
    pub init_seed: u64,
}

impl CascadeSpec {
    pub fn new(depth: usize, pretrained: usize, init_seed: u64) -> Self {
        CascadeSpec {
            depth,
            pretrained,
            source: CascadeSource::Lineages((0..pretrained).collect()),
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Invalid("cascade depth must be >= 1".into()));
        }
        if self.pretrained > self.depth {
            return Err(Error::Invalid(format!(
                "pretrained count {} exceeds depth {}",
                self.pretrained, self.depth
            )));
        }
        if let CascadeSource::Lineages(ids) = &self.source {
            if ids.len() != self.pretrained {
                return Err(Error::Invalid(format!(
                    "source list has {} lineages for {} pretrained slots",
                    ids.len(),
                    self.pretrained
                )));
            }
        }
        Ok(())
    }

    /// Lineage id for each pretrained slot.
    pub fn slot_sources(&self) -> Vec<usize> {
        match &self.source {
            CascadeSource::Lineages(ids) => ids.clone(),
            CascadeSource::Replicate(l) => vec![*l; self.pretrained],
        }
    }
}

fn check_sources(sources: &[&MaeParams], slots: &[usize]) -> Result<()> {
    if let Some(&max) = slots.iter().max() {
        if max >= sources.len() {
            return Err(Error::Invalid(format!(
                "cascade references lineage {max} but only {} sources given",
                sources.len()
            )));
        }
    }
    if let Some(first) = sources.first() {
        for s in sources.iter() {
            if s.dims != first.dims {
                return Err(Error::Shape("cascade sources have mismatched dims".into()));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ViT classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierDims {
    pub patch_dim: usize,
    pub num_patches: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct ViTClassifier {
    pub dims: ClassifierDims,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ViTClassifier {
    pub fn init(dims: ClassifierDims, rng: &mut RngStream) -> Self {
        ViTClassifier {
            dims,
            embed_w: init_trunc_normal(&[dims.patch_dim, dims.d_model], rng),
            embed_b: Tensor::zeros(&[dims.d_model]),
            pos: init_trunc_normal(&[dims.num_patches, dims.d_model], rng),
            blocks: (0..dims.depth)
                .map(|_| BlockParams::init(dims.d_model, dims.n_heads, 4 * dims.d_model, rng))
                .collect(),
            final_ln: LayerNormParams::new(dims.d_model),
            head_w: init_trunc_normal(&[dims.d_model, dims.n_classes], rng),
            head_b: Tensor::zeros(&[dims.n_classes]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let dims = self.dims;
        ViTClassifier {
            dims,
            embed_w: Tensor::zeros(&[dims.patch_dim, dims.d_model]),
            embed_b: Tensor::zeros(&[dims.d_model]),
            pos: Tensor::zeros(&[dims.num_patches, dims.d_model]),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            final_ln: LayerNormParams::zeros(dims.d_model),
            head_w: Tensor::zeros(&[dims.d_model, dims.n_classes]),
            head_b: Tensor::zeros(&[dims.n_classes]),
        }
    }
}

impl NamedParams for ViTClassifier {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("embed.w".into(), &self.embed_w);
        f("embed.b".into(), &self.embed_b);
        f("pos".into(), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i:02}"), f);
        }
        f("final_ln.g".into(), &self.final_ln.gain);
        f("final_ln.b".into(), &self.final_ln.shift);
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embed.w".into(), &mut self.embed_w);
        f("embed.b".into(), &mut self.embed_b);
        f("pos".into(), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i:02}"), f);
        }
        f("final_ln.g".into(), &mut self.final_ln.gain);
        f("final_ln.b".into(), &mut self.final_ln.shift);
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }
}

/// Assemble a depth-D classifier. Slots 1..=P_pre receive bit-exact copies of
/// the source encoders' blocks in the given order; the rest are fresh. The
/// patch embedding and positional table come from the first pretrained source
/// when there is one. The head is always fresh.
pub fn cascade_assemble(
    sources: &[&MaeParams],
    spec: &CascadeSpec,
    n_classes: usize,
) -> Result<ViTClassifier> {
    spec.validate()?;
    let slots = spec.slot_sources();
    check_sources(sources, &slots)?;
    if n_classes < 2 {
        return Err(Error::Invalid("classifier needs at least 2 classes".into()));
    }
    let template = slots
        .first()
        .map(|&l| sources[l])
        .or_else(|| sources.first().copied());
    let template = template.ok_or_else(|| {
        Error::Invalid("cascade with no sources: model dims unknown; provide at least one".into())
    })?;
    let dims = ClassifierDims {
        patch_dim: template.dims.patch_dim,
        num_patches: template.dims.num_patches,
        d_model: template.dims.d_enc,
        n_heads: template.dims.n_heads_enc,
        depth: spec.depth,
        n_classes,
    };
    let mut rng = RngStream::new(spec.init_seed).derive("cascade-init", 0);
    let mut clf = ViTClassifier::init(dims, &mut rng);
    for (slot, &lineage) in slots.iter().enumerate() {
        clf.blocks[slot] = sources[lineage].enc_block.clone();
    }
    if let Some(&first) = slots.first() {
        clf.embed_w = sources[first].embed_w.clone();
        clf.embed_b = sources[first].embed_b.clone();
        clf.pos = sources[first].enc_pos.clone();
    }
    Ok(clf)
}

pub struct ClassifierForward {
    n: usize,
    x: Vec<f64>,
    block_caches: Vec<BlockCache>,
    block_inputs: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    ln_cache: crate::nn::LayerNormCache,
    ln_out: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn classifier_forward(clf: &ViTClassifier, patches: &PatchSequence) -> Result<ClassifierForward> {
    let dims = &clf.dims;
    if patches.patch_dim() != dims.patch_dim || patches.num_patches() != dims.num_patches {
        return Err(Error::Shape("patch sequence does not match classifier dims".into()));
    }
    let (n, bb, d) = (patches.n, dims.num_patches, dims.d_model);
    let rows = n * bb;

    let mut tokens = linear_fwd(&patches.data, &clf.embed_w, &clf.embed_b, rows);
    for i in 0..n {
        for patch in 0..bb {
            let tok = &mut tokens[(i * bb + patch) * d..(i * bb + patch + 1) * d];
            for (t, &e) in tok.iter_mut().zip(clf.pos.row(patch)) {
                *t += e;
            }
        }
    }

    let mut block_caches = Vec::with_capacity(dims.depth);
    let mut block_inputs = Vec::with_capacity(dims.depth);
    let mut cur = tokens;
    for block in &clf.blocks {
        block_inputs.push(cur.clone());
        let (next, cache) = block_fwd(block, &cur, n, bb);
        block_caches.push(cache);
        cur = next;
    }

    // Global average pooling over tokens, then LayerNorm, then linear head.
    let mut pooled = vec![0.0; n * d];
    for i in 0..n {
        let dst = &mut pooled[i * d..(i + 1) * d];
        for patch in 0..bb {
            let tok = &cur[(i * bb + patch) * d..(i * bb + patch + 1) * d];
            for (o, &t) in dst.iter_mut().zip(tok) {
                *o += t;
            }
        }
        dst.iter_mut().for_each(|v| *v /= bb as f64);
    }
    let (ln_out, ln_cache) = layer_norm_fwd(&clf.final_ln, &pooled, n);
    let logits = linear_fwd(&ln_out, &clf.head_w, &clf.head_b, n);

    Ok(ClassifierForward {
        n,
        x: patches.data.clone(),
        block_caches,
        block_inputs,
        pooled,
        ln_cache,
        ln_out,
        logits,
    })
}

pub fn classifier_backward(
    clf: &ViTClassifier,
    fwd: &ClassifierForward,
    dlogits: &[f64],
    grads: &mut ViTClassifier,
) {
    let dims = &clf.dims;
    let (n, bb, d) = (fwd.n, dims.num_patches, dims.d_model);

    let dln_out = linear_bwd(&fwd.ln_out, &clf.head_w, dlogits, n, &mut grads.head_w, &mut grads.head_b);
    let dpooled = layer_norm_bwd(&clf.final_ln, &fwd.ln_cache, &dln_out, n, &mut grads.final_ln);
    let _ = &fwd.pooled;

    let mut dtokens = vec![0.0; n * bb * d];
    let inv = 1.0 / bb as f64;
    for i in 0..n {
        let dp = &dpooled[i * d..(i + 1) * d];
        for patch in 0..bb {
            let dst = &mut dtokens[(i * bb + patch) * d..(i * bb + patch + 1) * d];
            for (o, &g) in dst.iter_mut().zip(dp) {
                *o += g * inv;
            }
        }
    }

    for idx in (0..dims.depth).rev() {
        dtokens = block_bwd(
            &clf.blocks[idx],
            &fwd.block_caches[idx],
            &dtokens,
            n,
            bb,
            &mut grads.blocks[idx],
        );
        let _ = &fwd.block_inputs[idx];
    }

    for i in 0..n {
        for patch in 0..bb {
            let dt = &dtokens[(i * bb + patch) * d..(i * bb + patch + 1) * d];
            for (g, &v) in grads.pos.data_mut()[patch * d..(patch + 1) * d]
                .iter_mut()
                .zip(dt)
            {
                *g += v;
            }
        }
    }
    linear_bwd(
        &fwd.x,
        &clf.embed_w,
        &dtokens,
        n * bb,
        &mut grads.embed_w,
        &mut grads.embed_b,
    );
}

/// Cross-entropy loss and gradients for one labeled batch.
pub fn classifier_loss_and_grads(
    clf: &ViTClassifier,
    patches: &PatchSequence,
    labels: &[usize],
) -> Result<(f64, ViTClassifier)> {
    let fwd = classifier_forward(clf, patches)?;
    let (loss, dlogits) =
        softmax_cross_entropy(&fwd.logits, labels, fwd.n, clf.dims.n_classes);
    let mut grads = clf.zeros_like();
    classifier_backward(clf, &fwd, &dlogits, &mut grads);
    Ok((loss, grads))
}

/// Stratified subsample of `fraction` of the labeled training set.
pub fn stratified_subsample(
    labels: &[usize],
    n_classes: usize,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Invalid(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked = Vec::new();
    for (c, pool) in by_class.iter_mut().enumerate() {
        if pool.is_empty() {
            return Err(Error::Invalid(format!("class {c} has no training samples")));
        }
        rng.shuffle(pool);
        let take = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
        picked.extend_from_slice(&pool[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Full fine-tuning (all parameters trainable) with softmax cross-entropy on
/// a stratified `label_fraction` of the training labels. Returns the trained
/// classifier and the per-epoch mean loss curve.
pub fn finetune(
    clf: &ViTClassifier,
    train: &ImageBatch,
    patch: usize,
    label_fraction: f64,
    epochs: usize,
    batch_size: usize,
    adam: AdamConfig,
    rng: &RngStream,
) -> Result<(ViTClassifier, Vec<f64>)> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("fine-tuning needs labels".into()))?;
    if (label_fraction * train.n as f64) < clf.dims.n_classes as f64 {
        return Err(Error::Invalid(format!(
            "label fraction {label_fraction} keeps fewer samples than classes"
        )));
    }
    let mut sub_rng = rng.derive("subsample", 0);
    let picked = stratified_subsample(labels, clf.dims.n_classes, label_fraction, &mut sub_rng)?;
    let sub = train.subset(&picked);
    let sub_labels = sub.labels.clone().expect("labels survive subset");
    let patches = patchify(&sub, patch)?;

    let mut model = clf.clone();
    let mut opt = OptimizerState::new(adam);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut epoch_rng = rng.derive("epoch", epoch as u64);
        let order = epoch_rng.permutation(patches.n);
        let mut losses = Vec::new();
        for chunk in order.chunks(batch_size) {
            let batch = patches.subset(chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| sub_labels[i]).collect();
            let (loss, grads) = classifier_loss_and_grads(&model, &batch, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss in epoch {epoch}")));
            }
            opt.step(&mut model, &grads);
            losses.push(loss);
        }
        curve.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok((model, curve))
}

/// Top-1 accuracy; argmax ties break toward the lowest class index.
pub fn evaluate(clf: &ViTClassifier, test: &ImageBatch, patch: usize) -> Result<f64> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("evaluation needs labels".into()))?;
    if test.n == 0 {
        return Err(Error::Invalid("evaluation on an empty set".into()));
    }
    let patches = patchify(test, patch)?;
    let mut correct = 0usize;
    let c = clf.dims.n_classes;
    // Chunked to bound the forward buffers.
    let chunk_size = 64;
    let all: Vec<usize> = (0..test.n).collect();
    for chunk in all.chunks(chunk_size) {
        let batch = patches.subset(chunk);
        let fwd = classifier_forward(clf, &batch)?;
        for (row, &i) in chunk.iter().enumerate() {
            if argmax(&fwd.logits[row * c..(row + 1) * c]) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.n as f64)
}

// ---------------------------------------------------------------------------
// Multi-block MAE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiBlockMae {
    pub dims: MaeDims,
    pub depth: usize,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub enc_pos: Tensor,
    pub enc_blocks: Vec<BlockParams>,
    pub dec_proj_w: Tensor,
    pub dec_proj_b: Tensor,
    pub mask_token: Tensor,
    pub dec_pos: Tensor,
    pub dec_block: BlockParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl NamedParams for MultiBlockMae {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("enc.embed.w".into(), &self.embed_w);
        f("enc.embed.b".into(), &self.embed_b);
        f("enc.pos".into(), &self.enc_pos);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.visit(&format!("enc.block{i:02}"), f);
        }
        f("dec.proj.w".into(), &self.dec_proj_w);
        f("dec.proj.b".into(), &self.dec_proj_b);
        f("dec.mask_token".into(), &self.mask_token);
        f("dec.pos".into(), &self.dec_pos);
        self.dec_block.visit("dec.block", f);
        f("dec.head.w".into(), &self.head_w);
        f("dec.head.b".into(), &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("enc.embed.w".into(), &mut self.embed_w);
        f("enc.embed.b".into(), &mut self.embed_b);
        f("enc.pos".into(), &mut self.enc_pos);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("enc.block{i:02}"), f);
        }
        f("dec.proj.w".into(), &mut self.dec_proj_w);
        f("dec.proj.b".into(), &mut self.dec_proj_b);
        f("dec.mask_token".into(), &mut self.mask_token);
        f("dec.pos".into(), &mut self.dec_pos);
        self.dec_block.visit_mut("dec.block", f);
        f("dec.head.w".into(), &mut self.head_w);
        f("dec.head.b".into(), &mut self.head_b);
    }
}

impl MultiBlockMae {
    pub fn fresh(dims: MaeDims, depth: usize, rng: &mut RngStream) -> Self {
        let proto = MaeParams::init(dims, rng);
        MultiBlockMae {
            dims,
            depth,
            embed_w: proto.embed_w,
            embed_b: proto.embed_b,
            enc_pos: proto.enc_pos,
            enc_blocks: (0..depth)
                .map(|_| BlockParams::init(dims.d_enc, dims.n_heads_enc, dims.enc_ff(), rng))
                .collect(),
            dec_proj_w: proto.dec_proj_w,
            dec_proj_b: proto.dec_proj_b,
            mask_token: proto.mask_token,
            dec_pos: proto.dec_pos,
            dec_block: proto.dec_block,
            head_w: proto.head_w,
            head_b: proto.head_b,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }
}

/// Cascade `depth` encoder blocks from the sources (lineage order) and take
/// everything else (embedding, positions, decoder) from the first source.
/// Slots beyond the source list are freshly initialized from `init_seed`.
pub fn assemble_multiblock_mae(
    sources: &[&MaeParams],
    depth: usize,
    init_seed: u64,
) -> Result<MultiBlockMae> {
    if depth == 0 {
        return Err(Error::Invalid("multi-block depth must be >= 1".into()));
    }
    let first = sources
        .first()
        .ok_or_else(|| Error::Invalid("multi-block assembly needs at least one source".into()))?;
    check_sources(sources, &(0..sources.len().min(depth)).collect::<Vec<_>>())?;
    let dims = first.dims;
    let mut rng = RngStream::new(init_seed).derive("mb-init", 0);
    let enc_blocks: Vec<BlockParams> = (0..depth)
        .map(|i| {
            if i < sources.len() {
                sources[i].enc_block.clone()
            } else {
                BlockParams::init(dims.d_enc, dims.n_heads_enc, dims.enc_ff(), &mut rng)
            }
        })
        .collect();
    Ok(MultiBlockMae {
        dims,
        depth,
        embed_w: first.embed_w.clone(),
        embed_b: first.embed_b.clone(),
        enc_pos: first.enc_pos.clone(),
        enc_blocks,
        dec_proj_w: first.dec_proj_w.clone(),
        dec_proj_b: first.dec_proj_b.clone(),
        mask_token: first.mask_token.clone(),
        dec_pos: first.dec_pos.clone(),
        dec_block: first.dec_block.clone(),
        head_w: first.head_w.clone(),
        head_b: first.head_b.clone(),
    })
}

pub struct MultiBlockForward {
    n: usize,
    visible: usize,
    x_vis: Vec<f64>,
    enc_caches: Vec<BlockCache>,
    latents: Vec<f64>,
    dec_cache: BlockCache,
    dec_out: Vec<f64>,
    pub recon: Vec<f64>,
}

pub fn multiblock_forward(
    m: &MultiBlockMae,
    patches: &PatchSequence,
    plan: &MaskPlan,
) -> Result<MultiBlockForward> {
    let dims = &m.dims;
    if patches.patch_dim() != dims.patch_dim || patches.num_patches() != dims.num_patches {
        return Err(Error::Shape("patch sequence does not match model dims".into()));
    }
    let b_vis = plan
        .uniform_visible()
        .filter(|&b| b > 0)
        .ok_or_else(|| Error::Invalid("encoder requires a fixed-count plan with b >= 1".into()))?;
    let (n, bb, pd) = (patches.n, dims.num_patches, dims.patch_dim);

    let mut x_vis = vec![0.0; n * b_vis * pd];
    for i in 0..n {
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            x_vis[(i * b_vis + j) * pd..(i * b_vis + j + 1) * pd]
                .copy_from_slice(&patches.data[(i * bb + patch) * pd..(i * bb + patch + 1) * pd]);
        }
    }
    let mut cur = linear_fwd(&x_vis, &m.embed_w, &m.embed_b, n * b_vis);
    let de = dims.d_enc;
    for i in 0..n {
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            let tok = &mut cur[(i * b_vis + j) * de..(i * b_vis + j + 1) * de];
            for (t, &e) in tok.iter_mut().zip(m.enc_pos.row(patch)) {
                *t += e;
            }
        }
    }
    let mut enc_caches = Vec::with_capacity(m.depth);
    for block in &m.enc_blocks {
        let (next, cache) = block_fwd(block, &cur, n, b_vis);
        enc_caches.push(cache);
        cur = next;
    }
    let latents = cur;

    let proj = linear_fwd(&latents, &m.dec_proj_w, &m.dec_proj_b, n * b_vis);
    let dd = dims.d_dec;
    let mut tokens = vec![0.0; n * bb * dd];
    for i in 0..n {
        for patch in 0..bb {
            tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd]
                .copy_from_slice(m.mask_token.data());
        }
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd]
                .copy_from_slice(&proj[(i * b_vis + j) * dd..(i * b_vis + j + 1) * dd]);
        }
        for patch in 0..bb {
            let tok = &mut tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd];
            for (t, &e) in tok.iter_mut().zip(m.dec_pos.row(patch)) {
                *t += e;
            }
        }
    }
    let (dec_out, dec_cache) = block_fwd(&m.dec_block, &tokens, n, bb);
    let recon = linear_fwd(&dec_out, &m.head_w, &m.head_b, n * bb);
    Ok(MultiBlockForward {
        n,
        visible: b_vis,
        x_vis,
        enc_caches,
        latents,
        dec_cache,
        dec_out,
        recon,
    })
}

pub fn multiblock_backward(
    m: &MultiBlockMae,
    plan: &MaskPlan,
    fwd: &MultiBlockForward,
    drecon: &[f64],
    grads: &mut MultiBlockMae,
) {
    let dims = &m.dims;
    let (n, b_vis, bb, dd, de) = (fwd.n, fwd.visible, dims.num_patches, dims.d_dec, dims.d_enc);

    let ddec_out = linear_bwd(&fwd.dec_out, &m.head_w, drecon, n * bb, &mut grads.head_w, &mut grads.head_b);
    let dtokens = block_bwd(&m.dec_block, &fwd.dec_cache, &ddec_out, n, bb, &mut grads.dec_block);

    let mut dproj = vec![0.0; n * b_vis * dd];
    for i in 0..n {
        for patch in 0..bb {
            let dt = &dtokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd];
            for (g, &d) in grads.dec_pos.data_mut()[patch * dd..(patch + 1) * dd]
                .iter_mut()
                .zip(dt)
            {
                *g += d;
            }
            if !plan.is_visible(i, patch) {
                for (g, &d) in grads.mask_token.data_mut().iter_mut().zip(dt) {
                    *g += d;
                }
            }
        }
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            dproj[(i * b_vis + j) * dd..(i * b_vis + j + 1) * dd]
                .copy_from_slice(&dtokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd]);
        }
    }
    let mut dcur = linear_bwd(
        &fwd.latents,
        &m.dec_proj_w,
        &dproj,
        n * b_vis,
        &mut grads.dec_proj_w,
        &mut grads.dec_proj_b,
    );
    for idx in (0..m.depth).rev() {
        dcur = block_bwd(
            &m.enc_blocks[idx],
            &fwd.enc_caches[idx],
            &dcur,
            n,
            b_vis,
            &mut grads.enc_blocks[idx],
        );
    }
    for i in 0..n {
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            let dt = &dcur[(i * b_vis + j) * de..(i * b_vis + j + 1) * de];
            for (g, &d) in grads.enc_pos.data_mut()[patch * de..(patch + 1) * de]
                .iter_mut()
                .zip(dt)
            {
                *g += d;
            }
        }
    }
    linear_bwd(
        &fwd.x_vis,
        &m.embed_w,
        &dcur,
        n * b_vis,
        &mut grads.embed_w,
        &mut grads.embed_b,
    );
}

/// Mean masked reconstruction loss over a held-out set, masks drawn from rng.
pub fn multiblock_eval_loss(
    m: &MultiBlockMae,
    images: &ImageBatch,
    patch: usize,
    mask_ratio: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let patches = patchify(images, patch)?;
    let plan = sample_mask(
        patches.n,
        patches.num_patches(),
        mask_ratio,
        MaskSemantics::FixedCount,
        rng,
    )?;
    let fwd = multiblock_forward(m, &patches, &plan)?;
    Ok(masked_recon_loss(&fwd.recon, &patches, &plan, LossMode::MaskedOnly)?.0)
}

/// Masked-reconstruction training of the assembled model on server-side
/// unlabeled data. Zero epochs or an empty set leave the model untouched.
pub fn server_refine(
    m: &MultiBlockMae,
    unlabeled: &ImageBatch,
    epochs: usize,
    batch_size: usize,
    mask_ratio: f64,
    adam: AdamConfig,
    rng: &RngStream,
) -> Result<MultiBlockMae> {
    if unlabeled.n == 0 || epochs == 0 {
        return Ok(m.clone());
    }
    let patches = patchify(unlabeled, m_patch_size(m, unlabeled)?)?;
    let mut model = m.clone();
    let mut opt = OptimizerState::new(adam);
    for epoch in 0..epochs {
        let mut epoch_rng = rng.derive("refine-epoch", epoch as u64);
        let order = epoch_rng.permutation(patches.n);
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch = patches.subset(chunk);
            let mut batch_rng = epoch_rng.derive("batch", bi as u64);
            let plan = sample_mask(
                batch.n,
                batch.num_patches(),
                mask_ratio,
                MaskSemantics::FixedCount,
                &mut batch_rng,
            )?;
            let fwd = multiblock_forward(&model, &batch, &plan)?;
            let (loss, drecon) = masked_recon_loss(&fwd.recon, &batch, &plan, LossMode::MaskedOnly)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("server refinement loss in epoch {epoch}")));
            }
            let mut grads = model.zeros_like();
            multiblock_backward(&model, &plan, &fwd, &drecon, &mut grads);
            opt.step(&mut model, &grads);
        }
    }
    Ok(model)
}

/// Infer the patch size from model dims and image channels.
fn m_patch_size(m: &MultiBlockMae, images: &ImageBatch) -> Result<usize> {
    let per_channel = m.dims.patch_dim / images.channels;
    let p = (per_channel as f64).sqrt().round() as usize;
    if p * p * images.channels != m.dims.patch_dim {
        return Err(Error::Shape(format!(
            "cannot infer square patch from patch_dim {} and {} channels",
            m.dims.patch_dim, images.channels
        )));
    }
    Ok(p)
}

/// Turn a classifier's encoder into a multi-block MAE by attaching a decoder
/// (used when refined encoders go back into classification).
pub fn classifier_from_multiblock(m: &MultiBlockMae, n_classes: usize, init_seed: u64) -> ViTClassifier {
    let dims = ClassifierDims {
        patch_dim: m.dims.patch_dim,
        num_patches: m.dims.num_patches,
        d_model: m.dims.d_enc,
        n_heads: m.dims.n_heads_enc,
        depth: m.depth,
        n_classes,
    };
    let mut rng = RngStream::new(init_seed).derive("clf-from-mb", 0);
    let mut clf = ViTClassifier::init(dims, &mut rng);
    clf.embed_w = m.embed_w.clone();
    clf.embed_b = m.embed_b.clone();
    clf.pos = m.enc_pos.clone();
    clf.blocks = m.enc_blocks.clone();
    clf
}

// ---------------------------------------------------------------------------
// Reconstruction dumps (binary PPM P6)
// ---------------------------------------------------------------------------

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::with_capacity(rgb.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(rgb);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn blit(canvas: &mut [u8], canvas_w: usize, x0: usize, y0: usize, img: &ImageBatch, index: usize) {
    let hw = img.height * img.width;
    let pix = img.image(index);
    for y in 0..img.height {
        for x in 0..img.width {
            let (r, g, b) = if img.channels >= 3 {
                (pix[y * img.width + x], pix[hw + y * img.width + x], pix[2 * hw + y * img.width + x])
            } else {
                let v = pix[y * img.width + x];
                (v, v, v)
            };
            let off = ((y0 + y) * canvas_w + x0 + x) * 3;
            canvas[off] = (r.clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas[off + 1] = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas[off + 2] = (b.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
}

fn recon_to_images(m: &MultiBlockMae, patches: &PatchSequence, plan: &MaskPlan) -> Result<ImageBatch> {
    let fwd = multiblock_forward(m, patches, plan)?;
    let recon_seq = PatchSequence {
        n: patches.n,
        geom: patches.geom,
        data: fwd.recon,
    };
    unpatchify(&recon_seq)
}

/// Write a quaternion grid: per row, the masked input, the reconstruction of
/// a freshly initialized model of the same shape, this model's
/// reconstruction, and the ground truth. One image row per input image.
pub fn reconstruct_dump(
    m: &MultiBlockMae,
    images: &ImageBatch,
    mask_ratio: f64,
    rng: &mut RngStream,
    path: &Path,
) -> Result<()> {
    let patch = m_patch_size(m, images)?;
    let patches = patchify(images, patch)?;
    let plan = sample_mask(
        patches.n,
        patches.num_patches(),
        mask_ratio,
        MaskSemantics::FixedCount,
        &mut rng.derive("dump-mask", 0),
    )?;
    let masked = unpatchify(&apply_mask_zero(&patches, &plan)?)?;
    let fresh = MultiBlockMae::fresh(m.dims, m.depth, &mut rng.derive("dump-fresh", 0));
    let fresh_recon = recon_to_images(&fresh, &patches, &plan)?;
    let model_recon = recon_to_images(m, &patches, &plan)?;

    let (h, w) = (images.height, images.width);
    let canvas_w = 4 * w;
    let canvas_h = images.n * h;
    let mut canvas = vec![0u8; canvas_w * canvas_h * 3];
    for i in 0..images.n {
        blit(&mut canvas, canvas_w, 0, i * h, &masked, i);
        blit(&mut canvas, canvas_w, w, i * h, &fresh_recon, i);
        blit(&mut canvas, canvas_w, 2 * w, i * h, &model_recon, i);
        blit(&mut canvas, canvas_w, 3 * w, i * h, images, i);
    }
    write_ppm(path, canvas_w, canvas_h, &canvas)
}

// ---------------------------------------------------------------------------
// Model footprint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub params: usize,
    /// Forward mul-add FLOPs per image (2 per multiply-accumulate), matrix
    /// products and attention scores only.
    pub flops: u64,
}

fn block_flops(tokens: u64, d: u64, d_ff: u64) -> u64 {
    let qkvo = 4 * 2 * tokens * d * d;
    let scores = 2 * tokens * tokens * d; // Q K^T across all heads
    let mix = 2 * tokens * tokens * d; // probs @ V
    let mlp = 2 * 2 * tokens * d * d_ff;
    qkvo + scores + mix + mlp
}

/// Pretraining footprint: encoder runs on the visible tokens only, the
/// decoder on the full sequence.
pub fn mae_footprint(m: &MaeParams, visible_tokens: usize) -> Footprint {
    let d = &m.dims;
    let (b, pd) = (d.num_patches as u64, d.patch_dim as u64);
    let (de, dd) = (d.d_enc as u64, d.d_dec as u64);
    let vis = visible_tokens as u64;
    let mut flops = 2 * vis * pd * de; // patch embedding
    flops += block_flops(vis, de, d.enc_ff() as u64);
    flops += 2 * vis * de * dd; // latent projection
    flops += block_flops(b, dd, d.dec_ff() as u64);
    flops += 2 * b * dd * pd; // pixel head
    Footprint {
        params: m.num_scalars(),
        flops,
    }
}

pub fn classifier_footprint(c: &ViTClassifier) -> Footprint {
    let d = &c.dims;
    let (b, pd, dm) = (d.num_patches as u64, d.patch_dim as u64, d.d_model as u64);
    let mut flops = 2 * b * pd * dm;
    flops += d.depth as u64 * block_flops(b, dm, 4 * dm);
    flops += 2 * dm * d.n_classes as u64; // head on the pooled token
    Footprint {
        params: c.num_scalars(),
        flops,
    }
}

// ---------------------------------------------------------------------------
// Checkpoint adapters
// ---------------------------------------------------------------------------

pub fn classifier_checkpoint_meta(dims: &ClassifierDims) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("patch_dim".into(), dims.patch_dim.to_string());
    meta.insert("num_patches".into(), dims.num_patches.to_string());
    meta.insert("d_model".into(), dims.d_model.to_string());
    meta.insert("n_heads".into(), dims.n_heads.to_string());
    meta.insert("depth".into(), dims.depth.to_string());
    meta.insert("n_classes".into(), dims.n_classes.to_string());
    meta
}

pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<ViTClassifier> {
    if ckpt.kind != "classifier" {
        return Err(Error::Parse(format!(
            "expected a classifier checkpoint, found {}",
            ckpt.kind
        )));
    }
    let dims = ClassifierDims {
        patch_dim: ckpt.meta_usize("patch_dim")?,
        num_patches: ckpt.meta_usize("num_patches")?,
        d_model: ckpt.meta_usize("d_model")?,
        n_heads: ckpt.meta_usize("n_heads")?,
        depth: ckpt.meta_usize("depth")?,
        n_classes: ckpt.meta_usize("n_classes")?,
    };
    let mut clf = ViTClassifier::init(dims, &mut RngStream::new(0));
    ckpt.load_into(&mut clf)?;
    Ok(clf)
}

pub fn multiblock_checkpoint_meta(m: &MultiBlockMae) -> BTreeMap<String, String> {
    let mut meta = crate::fed::mae_checkpoint_meta(&m.dims);
    meta.insert("depth".into(), m.depth.to_string());
    meta
}

pub fn multiblock_from_checkpoint(ckpt: &Checkpoint) -> Result<MultiBlockMae> {
    if ckpt.kind != "multiblock-mae" {
        return Err(Error::Parse(format!(
            "expected a multiblock-mae checkpoint, found {}",
            ckpt.kind
        )));
    }
    let dims = MaeDims {
        patch_dim: ckpt.meta_usize("patch_dim")?,
        num_patches: ckpt.meta_usize("num_patches")?,
        d_enc: ckpt.meta_usize("d_enc")?,
        d_dec: ckpt.meta_usize("d_dec")?,
        n_heads_enc: ckpt.meta_usize("n_heads_enc")?,
        n_heads_dec: ckpt.meta_usize("n_heads_dec")?,
    };
    let depth = ckpt.meta_usize("depth")?;
    let mut m = MultiBlockMae::fresh(dims, depth, &mut RngStream::new(0));
    ckpt.load_into(&mut m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::gradcheck::grad_check;
    use crate::param::ParamStore;

    fn tiny_mae_dims() -> MaeDims {
        MaeDims {
            patch_dim: 4,
            num_patches: 4,
            d_enc: 8,
            d_dec: 4,
            n_heads_enc: 2,
            n_heads_dec: 2,
        }
    }

    fn trained_sources(k: usize, seed: u64) -> Vec<MaeParams> {
        let rng = RngStream::new(seed);
        (0..k)
            .map(|i| MaeParams::init(tiny_mae_dims(), &mut rng.derive("src", i as u64)))
            .collect()
    }

    #[test]
    fn assemble_copies_blocks_bit_exactly() {
        let sources = trained_sources(3, 1);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let spec = CascadeSpec::new(3, 3, 42);
        let clf = cascade_assemble(&refs, &spec, 4).unwrap();
        for (i, src) in sources.iter().enumerate() {
            let a = crate::nn::block_to_store(&clf.blocks[i], &clf.blocks[i].zeros_like(), "b");
            let b = crate::nn::block_to_store(&src.enc_block, &src.enc_block.zeros_like(), "b");
            assert!(a.bitwise_eq(&b), "block {i} not copied bit-exactly");
        }
        assert!(clf.embed_w.data() == sources[0].embed_w.data());
        assert_eq!(clf.pos.data(), sources[0].enc_pos.data());
    }

    #[test]
    fn assemble_partial_pretrained() {
        let sources = trained_sources(3, 2);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let spec = CascadeSpec::new(5, 3, 7);
        let clf = cascade_assemble(&refs, &spec, 4).unwrap();
        assert_eq!(clf.blocks.len(), 5);
        // blocks 3 and 4 are fresh: they differ from every source block
        for fresh_idx in 3..5 {
            for src in &sources {
                let a = crate::nn::block_to_store(&clf.blocks[fresh_idx], &clf.blocks[fresh_idx].zeros_like(), "b");
                let b = crate::nn::block_to_store(&src.enc_block, &src.enc_block.zeros_like(), "b");
                assert!(!a.bitwise_eq(&b));
            }
        }
    }

    #[test]
    fn assemble_depth1_equals_source_block() {
        let sources = trained_sources(1, 3);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let clf = cascade_assemble(&refs, &CascadeSpec::new(1, 1, 0), 2).unwrap();
        let a = crate::nn::block_to_store(&clf.blocks[0], &clf.blocks[0].zeros_like(), "b");
        let b = crate::nn::block_to_store(&sources[0].enc_block, &sources[0].enc_block.zeros_like(), "b");
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn replicate_fills_all_slots_with_one_lineage() {
        let sources = trained_sources(2, 4);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let spec = CascadeSpec {
            depth: 3,
            pretrained: 3,
            source: CascadeSource::Replicate(1),
            init_seed: 0,
        };
        let clf = cascade_assemble(&refs, &spec, 2).unwrap();
        for i in 0..3 {
            let a = crate::nn::block_to_store(&clf.blocks[i], &clf.blocks[i].zeros_like(), "b");
            let b = crate::nn::block_to_store(&sources[1].enc_block, &sources[1].enc_block.zeros_like(), "b");
            assert!(a.bitwise_eq(&b));
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let sources = trained_sources(1, 5);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        assert!(cascade_assemble(&refs, &CascadeSpec::new(2, 3, 0), 2).is_err());
        let spec = CascadeSpec {
            depth: 2,
            pretrained: 2,
            source: CascadeSource::Lineages(vec![0, 5]),
            init_seed: 0,
        };
        assert!(cascade_assemble(&refs, &spec, 2).is_err());
    }

    #[test]
    fn classifier_grad_check() {
        let mut rng = RngStream::new(6);
        let dims = ClassifierDims {
            patch_dim: 4,
            num_patches: 4,
            d_model: 8,
            n_heads: 2,
            depth: 2,
            n_classes: 3,
        };
        let clf = ViTClassifier::init(dims, &mut rng);
        let ds = synth_dataset(2, 3, 4, 4, 0.3, &mut rng).unwrap();
        let patches = patchify(&ds, 2).unwrap();
        let labels = ds.labels.clone().unwrap();

        let (_, grads) = classifier_loss_and_grads(&clf, &patches, &labels).unwrap();
        let mut store = clf.to_store();
        grads.visit(&mut |name, g| {
            *store.grad_mut(&name) = g.clone();
        });
        let report = grad_check(
            &mut store,
            |s: &ParamStore| {
                let mut model = clf.clone();
                model.load_store(s)?;
                let fwd = classifier_forward(&model, &patches)?;
                Ok(softmax_cross_entropy(&fwd.logits, &labels, fwd.n, 3).0)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "worst {:?}", report.worst());
    }

    #[test]
    fn evaluate_constant_and_perfect_predictors() {
        let mut rng = RngStream::new(7);
        let dims = ClassifierDims {
            patch_dim: 4,
            num_patches: 4,
            d_model: 8,
            n_heads: 2,
            depth: 1,
            n_classes: 4,
        };
        // Constant predictor: zero everything; logits all zero, argmax = 0.
        let mut clf = ViTClassifier::init(dims, &mut rng);
        clf.visit_mut(&mut |_, t| t.fill(0.0));
        let ds = synth_dataset(10, 4, 4, 4, 0.2, &mut rng).unwrap();
        let acc = evaluate(&clf, &ds, 2).unwrap();
        assert!((acc - 0.25).abs() < 1e-12, "constant predictor acc {acc}");
    }

    #[test]
    fn finetune_learns_toy_task() {
        let mut rng = RngStream::new(8);
        let ds = synth_dataset(12, 2, 8, 8, 0.05, &mut rng).unwrap();
        let dims = ClassifierDims {
            patch_dim: 16,
            num_patches: 4,
            d_model: 16,
            n_heads: 2,
            depth: 1,
            n_classes: 2,
        };
        let clf = ViTClassifier::init(dims, &mut rng);
        let before = evaluate(&clf, &ds, 4).unwrap();
        let (trained, curve) = finetune(
            &clf,
            &ds,
            4,
            1.0,
            12,
            8,
            AdamConfig::default(),
            &RngStream::new(9),
        )
        .unwrap();
        let after = evaluate(&trained, &ds, 4).unwrap();
        assert!(curve.first().unwrap() > curve.last().unwrap());
        assert!(after >= 0.95, "before {before}, after {after}");
    }

    #[test]
    fn finetune_zero_epochs_keeps_model() {
        let mut rng = RngStream::new(10);
        let ds = synth_dataset(4, 2, 4, 4, 0.2, &mut rng).unwrap();
        let dims = ClassifierDims {
            patch_dim: 4,
            num_patches: 4,
            d_model: 8,
            n_heads: 2,
            depth: 1,
            n_classes: 2,
        };
        let clf = ViTClassifier::init(dims, &mut rng);
        let (same, curve) = finetune(&clf, &ds, 2, 1.0, 0, 4, AdamConfig::default(), &RngStream::new(1)).unwrap();
        assert!(curve.is_empty());
        assert!(clf.to_store().bitwise_eq(&same.to_store()));
    }

    #[test]
    fn label_fraction_subsample_is_stratified() {
        let mut rng = RngStream::new(11);
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let picked = stratified_subsample(&labels, 4, 0.3, &mut rng).unwrap();
        let mut per_class = [0usize; 4];
        for &i in &picked {
            per_class[labels[i]] += 1;
        }
        assert_eq!(per_class, [3, 3, 3, 3]);
    }

    #[test]
    fn multiblock_depth1_matches_source_mae() {
        let sources = trained_sources(1, 12);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let mb = assemble_multiblock_mae(&refs, 1, 0).unwrap();
        let mut rng = RngStream::new(13);
        let ds = synth_dataset(3, 2, 4, 4, 0.3, &mut rng).unwrap();
        let patches = patchify(&ds, 2).unwrap();
        let plan = sample_mask(patches.n, 4, 0.5, MaskSemantics::FixedCount, &mut rng).unwrap();
        let mb_fwd = multiblock_forward(&mb, &patches, &plan).unwrap();
        let mae_fwd = crate::mae::mae_forward(&sources[0], &patches, &plan).unwrap();
        assert_eq!(mb_fwd.recon, mae_fwd.recon);
    }

    #[test]
    fn multiblock_distinct_sources_distinct_blocks() {
        let sources = trained_sources(5, 14);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let mb = assemble_multiblock_mae(&refs, 5, 0).unwrap();
        for i in 0..5 {
            for j in (i + 1)..5 {
                let a = crate::nn::block_to_store(&mb.enc_blocks[i], &mb.enc_blocks[i].zeros_like(), "b");
                let b = crate::nn::block_to_store(&mb.enc_blocks[j], &mb.enc_blocks[j].zeros_like(), "b");
                assert!(a.max_abs_diff(&b).unwrap() > 0.0, "blocks {i},{j} identical");
            }
        }
    }

    #[test]
    fn multiblock_grad_check() {
        let sources = trained_sources(2, 15);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let m = assemble_multiblock_mae(&refs, 2, 3).unwrap();
        let mut rng = RngStream::new(16);
        let ds = synth_dataset(2, 2, 4, 4, 0.3, &mut rng).unwrap();
        let patches = patchify(&ds, 2).unwrap();
        let plan = sample_mask(patches.n, 4, 0.5, MaskSemantics::FixedCount, &mut rng).unwrap();

        let fwd = multiblock_forward(&m, &patches, &plan).unwrap();
        let (_, drecon) = masked_recon_loss(&fwd.recon, &patches, &plan, LossMode::MaskedOnly).unwrap();
        let mut grads = m.zeros_like();
        multiblock_backward(&m, &plan, &fwd, &drecon, &mut grads);

        let mut store = m.to_store();
        grads.visit(&mut |name, g| {
            *store.grad_mut(&name) = g.clone();
        });
        let report = grad_check(
            &mut store,
            |s: &ParamStore| {
                let mut model = m.clone();
                model.load_store(s)?;
                let fwd = multiblock_forward(&model, &patches, &plan)?;
                Ok(masked_recon_loss(&fwd.recon, &patches, &plan, LossMode::MaskedOnly)?.0)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "worst {:?}", report.worst());
    }

    #[test]
    fn server_refine_noop_cases() {
        let sources = trained_sources(1, 17);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let m = assemble_multiblock_mae(&refs, 1, 0).unwrap();
        let mut rng = RngStream::new(18);
        let ds = synth_dataset(4, 2, 4, 4, 0.2, &mut rng).unwrap();
        let empty = ds.subset(&[]);

        let a = server_refine(&m, &empty, 3, 4, 0.5, AdamConfig::default(), &RngStream::new(1)).unwrap();
        assert!(a.to_store().bitwise_eq(&m.to_store()));
        let b = server_refine(&m, &ds, 0, 4, 0.5, AdamConfig::default(), &RngStream::new(1)).unwrap();
        assert!(b.to_store().bitwise_eq(&m.to_store()));
    }

    #[test]
    fn server_refine_reduces_eval_loss() {
        let sources = trained_sources(1, 19);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let m = assemble_multiblock_mae(&refs, 1, 0).unwrap();
        let mut rng = RngStream::new(20);
        let ds = synth_dataset(16, 2, 4, 4, 0.2, &mut rng).unwrap();
        let before = multiblock_eval_loss(&m, &ds, 2, 0.5, &mut RngStream::new(5)).unwrap();
        let refined = server_refine(&m, &ds, 10, 8, 0.5, AdamConfig::default(), &RngStream::new(2)).unwrap();
        let after = multiblock_eval_loss(&refined, &ds, 2, 0.5, &mut RngStream::new(5)).unwrap();
        assert!(after < before, "before {before}, after {after}");
    }

    #[test]
    fn reconstruct_dump_layout() {
        let sources = trained_sources(1, 21);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let m = assemble_multiblock_mae(&refs, 1, 0).unwrap();
        let mut rng = RngStream::new(22);
        let ds = synth_dataset(2, 2, 4, 4, 0.2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.ppm");
        reconstruct_dump(&m, &ds, 0.5, &mut rng, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = format!("P6\n{} {}\n255\n", 4 * 4, 4 * 4);
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + 16 * 16 * 3);
    }

    #[test]
    fn footprint_formulas() {
        // Hand-checked: linear layer params d*k + k.
        let mut rng = RngStream::new(23);
        let dims = ClassifierDims {
            patch_dim: 4,
            num_patches: 4,
            d_model: 8,
            n_heads: 2,
            depth: 1,
            n_classes: 3,
        };
        let clf = ViTClassifier::init(dims, &mut rng);
        // embed 4*8+8, pos 4*8, block: ln1 16 + qkvo 4*(64+8) + ln2 16 +
        // mlp (8*32+32 + 32*8+8), final ln 16, head 8*3+3
        let block = 16 + 4 * (64 + 8) + 16 + (8 * 32 + 32) + (32 * 8 + 8);
        let expect = (4 * 8 + 8) + 32 + block + 16 + (8 * 3 + 3);
        assert_eq!(clf.num_scalars(), expect);

        // Doubling d_ff doubles the d_ff-proportional MLP params exactly
        // (w1, b1, w2; the output bias has d_model entries either way).
        let mlp1 = crate::nn::MlpParams::init(8, 32, &mut rng);
        let mlp2 = crate::nn::MlpParams::init(8, 64, &mut rng);
        let count = |m: &crate::nn::MlpParams| m.w1.len() + m.b1.len() + m.w2.len();
        assert_eq!(2 * count(&mlp1), count(&mlp2));
        assert_eq!(mlp1.b2.len(), mlp2.b2.len());
    }

    #[test]
    fn pretrain_model_smaller_than_downstream() {
        let sources = trained_sources(2, 24);
        let refs: Vec<&MaeParams> = sources.iter().collect();
        let mae_fp = mae_footprint(&sources[0], 1);
        for depth in 2..=5 {
            let spec = CascadeSpec::new(depth, 2, 0);
            let clf = cascade_assemble(&refs, &spec, 4).unwrap();
            let clf_fp = classifier_footprint(&clf);
            assert!(
                mae_fp.params < clf_fp.params,
                "depth {depth}: {} vs {}",
                mae_fp.params,
                clf_fp.params
            );
        }
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let mut rng = RngStream::new(25);
        let dims = ClassifierDims {
            patch_dim: 4,
            num_patches: 4,
            d_model: 8,
            n_heads: 2,
            depth: 2,
            n_classes: 3,
        };
        let clf = ViTClassifier::init(dims, &mut rng);
        let ckpt = Checkpoint::from_model("classifier", classifier_checkpoint_meta(&dims), &clf);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        crate::checkpoint::save_checkpoint(&ckpt, &path).unwrap();
        let loaded = classifier_from_checkpoint(&crate::checkpoint::load_checkpoint(&path).unwrap()).unwrap();
        assert!(clf.to_store().max_abs_diff(&loaded.to_store()).unwrap() < 1e-6);
    }
}
