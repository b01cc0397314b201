//! The one-block masked autoencoder: a visible-patch encoder, a full-sequence
//! decoder with a learnable mask token, the masked reconstruction loss and a
//! single optimizer step.
//!
//! The encoder embeds only the visible patches (no mask tokens on the encoder
//! side) and adds positional entries indexed by each patch's original grid
//! position; the decoder projects the latents, scatters them back, fills
//! masked slots with the mask token, and maps every token to a patch of
//! pixels.

use crate::data::{apply_mask_zero, MaskPlan, MaskSemantics, PatchSequence};
use crate::error::{Error, Result};
use crate::nn::{
    block_bwd, block_fwd, half_mse_selected, linear_bwd, linear_fwd, BlockCache, BlockParams,
};
use crate::optim::OptimizerState;
use crate::param::{init_trunc_normal, NamedParams};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaeDims {
    pub patch_dim: usize,
    pub num_patches: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub n_heads_enc: usize,
    pub n_heads_dec: usize,
}

impl MaeDims {
    /// Toy defaults: 16x16 grayscale images, 4x4 patches.
    pub fn toy() -> Self {
        MaeDims {
            patch_dim: 16,
            num_patches: 16,
            d_enc: 64,
            d_dec: 32,
            n_heads_enc: 4,
            n_heads_dec: 4,
        }
    }

    pub fn enc_ff(&self) -> usize {
        4 * self.d_enc
    }

    pub fn dec_ff(&self) -> usize {
        4 * self.d_dec
    }
}

#[derive(Debug, Clone)]
pub struct MaeParams {
    pub dims: MaeDims,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub enc_pos: Tensor,
    pub enc_block: BlockParams,
    pub dec_proj_w: Tensor,
    pub dec_proj_b: Tensor,
    pub mask_token: Tensor,
    pub dec_pos: Tensor,
    pub dec_block: BlockParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl MaeParams {
    pub fn init(dims: MaeDims, rng: &mut RngStream) -> Self {
        let b = dims.num_patches;
        MaeParams {
            dims,
            embed_w: init_trunc_normal(&[dims.patch_dim, dims.d_enc], rng),
            embed_b: Tensor::zeros(&[dims.d_enc]),
            enc_pos: init_trunc_normal(&[b, dims.d_enc], rng),
            enc_block: BlockParams::init(dims.d_enc, dims.n_heads_enc, dims.enc_ff(), rng),
            dec_proj_w: init_trunc_normal(&[dims.d_enc, dims.d_dec], rng),
            dec_proj_b: Tensor::zeros(&[dims.d_dec]),
            mask_token: init_trunc_normal(&[dims.d_dec], rng),
            dec_pos: init_trunc_normal(&[b, dims.d_dec], rng),
            dec_block: BlockParams::init(dims.d_dec, dims.n_heads_dec, dims.dec_ff(), rng),
            head_w: init_trunc_normal(&[dims.d_dec, dims.patch_dim], rng),
            head_b: Tensor::zeros(&[dims.patch_dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let dims = self.dims;
        MaeParams {
            dims,
            embed_w: Tensor::zeros(&[dims.patch_dim, dims.d_enc]),
            embed_b: Tensor::zeros(&[dims.d_enc]),
            enc_pos: Tensor::zeros(&[dims.num_patches, dims.d_enc]),
            enc_block: self.enc_block.zeros_like(),
            dec_proj_w: Tensor::zeros(&[dims.d_enc, dims.d_dec]),
            dec_proj_b: Tensor::zeros(&[dims.d_dec]),
            mask_token: Tensor::zeros(&[dims.d_dec]),
            dec_pos: Tensor::zeros(&[dims.num_patches, dims.d_dec]),
            dec_block: self.dec_block.zeros_like(),
            head_w: Tensor::zeros(&[dims.d_dec, dims.patch_dim]),
            head_b: Tensor::zeros(&[dims.patch_dim]),
        }
    }
}

impl NamedParams for MaeParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("enc.embed.w".into(), &self.embed_w);
        f("enc.embed.b".into(), &self.embed_b);
        f("enc.pos".into(), &self.enc_pos);
        self.enc_block.visit("enc.block", f);
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
        self.enc_block.visit_mut("enc.block", f);
        f("dec.proj.w".into(), &mut self.dec_proj_w);
        f("dec.proj.b".into(), &mut self.dec_proj_b);
        f("dec.mask_token".into(), &mut self.mask_token);
        f("dec.pos".into(), &mut self.dec_pos);
        self.dec_block.visit_mut("dec.block", f);
        f("dec.head.w".into(), &mut self.head_w);
        f("dec.head.b".into(), &mut self.head_b);
    }
}

/// Zero every additive parameter: biases, LayerNorm shifts, mask token and
/// positional tables. With these at zero the encoder and decoder both map
/// zero input to exactly zero output.
pub fn zero_additive_params(p: &mut MaeParams) {
    p.embed_b.fill(0.0);
    p.enc_pos.fill(0.0);
    p.dec_proj_b.fill(0.0);
    p.mask_token.fill(0.0);
    p.dec_pos.fill(0.0);
    p.head_b.fill(0.0);
    for block in [&mut p.enc_block, &mut p.dec_block] {
        block.ln1.shift.fill(0.0);
        block.ln2.shift.fill(0.0);
        block.attn.bq.fill(0.0);
        block.attn.bk.fill(0.0);
        block.attn.bv.fill(0.0);
        block.attn.bo.fill(0.0);
        block.mlp.b1.fill(0.0);
        block.mlp.b2.fill(0.0);
    }
}

fn check_plan(p: &MaeParams, patches: &PatchSequence, plan: &MaskPlan) -> Result<usize> {
    if patches.patch_dim() != p.dims.patch_dim || patches.num_patches() != p.dims.num_patches {
        return Err(Error::Shape(format!(
            "patch sequence {}x{} does not match model dims {}x{}",
            patches.num_patches(),
            patches.patch_dim(),
            p.dims.num_patches,
            p.dims.patch_dim
        )));
    }
    if plan.n() != patches.n || plan.num_patches != patches.num_patches() {
        return Err(Error::Shape("mask plan does not match patch sequence".into()));
    }
    let visible = plan
        .uniform_visible()
        .ok_or_else(|| Error::Invalid("encoder requires a fixed-count mask plan".into()))?;
    if visible == 0 {
        return Err(Error::Invalid("encoder needs at least one visible patch".into()));
    }
    Ok(visible)
}

pub struct MaeForward {
    pub n: usize,
    pub visible: usize,
    /// Gathered visible patch pixels, [n * b, patch_dim].
    x_vis: Vec<f64>,
    enc_cache: BlockCache,
    /// Encoder output, [n, b, d_enc].
    pub latents: Vec<f64>,
    dec_cache: BlockCache,
    dec_out: Vec<f64>,
    /// Reconstruction, [n, B, patch_dim].
    pub recon: Vec<f64>,
}

/// Run encoder then decoder, keeping every intermediate needed for backward.
pub fn mae_forward(p: &MaeParams, patches: &PatchSequence, plan: &MaskPlan) -> Result<MaeForward> {
    let b_vis = check_plan(p, patches, plan)?;
    let n = patches.n;
    let dims = &p.dims;
    let (pd, bb) = (dims.patch_dim, dims.num_patches);

    // Gather visible patches and embed them with their positional entries.
    let mut x_vis = vec![0.0; n * b_vis * pd];
    for i in 0..n {
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            let src = &patches.data[(i * bb + patch) * pd..(i * bb + patch + 1) * pd];
            x_vis[(i * b_vis + j) * pd..(i * b_vis + j + 1) * pd].copy_from_slice(src);
        }
    }
    let mut enc_in = linear_fwd(&x_vis, &p.embed_w, &p.embed_b, n * b_vis);
    for i in 0..n {
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            let pos = p.enc_pos.row(patch);
            let tok = &mut enc_in[(i * b_vis + j) * dims.d_enc..(i * b_vis + j + 1) * dims.d_enc];
            for (t, &e) in tok.iter_mut().zip(pos) {
                *t += e;
            }
        }
    }
    let (latents, enc_cache) = block_fwd(&p.enc_block, &enc_in, n, b_vis);

    // Decoder: project latents, scatter to original positions, fill the rest
    // with the mask token, add decoder positions.
    let proj = linear_fwd(&latents, &p.dec_proj_w, &p.dec_proj_b, n * b_vis);
    let dd = dims.d_dec;
    let mut tokens = vec![0.0; n * bb * dd];
    for i in 0..n {
        for patch in 0..bb {
            let tok = &mut tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd];
            tok.copy_from_slice(p.mask_token.data());
        }
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            let tok = &mut tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd];
            tok.copy_from_slice(&proj[(i * b_vis + j) * dd..(i * b_vis + j + 1) * dd]);
        }
        for patch in 0..bb {
            let tok = &mut tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd];
            for (t, &e) in tok.iter_mut().zip(p.dec_pos.row(patch)) {
                *t += e;
            }
        }
    }
    let (dec_out, dec_cache) = block_fwd(&p.dec_block, &tokens, n, bb);
    let recon = linear_fwd(&dec_out, &p.head_w, &p.head_b, n * bb);

    Ok(MaeForward {
        n,
        visible: b_vis,
        x_vis,
        enc_cache,
        latents,
        dec_cache,
        dec_out,
        recon,
    })
}

/// Accumulate parameter gradients for `d(loss)/d(recon) = drecon`.
pub fn mae_backward(
    p: &MaeParams,
    plan: &MaskPlan,
    fwd: &MaeForward,
    drecon: &[f64],
    grads: &mut MaeParams,
) {
    let dims = &p.dims;
    let (n, b_vis, bb, dd) = (fwd.n, fwd.visible, dims.num_patches, dims.d_dec);

    let ddec_out = linear_bwd(
        &fwd.dec_out,
        &p.head_w,
        drecon,
        n * bb,
        &mut grads.head_w,
        &mut grads.head_b,
    );
    let dtokens = block_bwd(&p.dec_block, &fwd.dec_cache, &ddec_out, n, bb, &mut grads.dec_block);

    // Split token gradients: decoder positions see every token, the mask
    // token sees masked slots, projected latents see visible slots.
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
            let dt = &dtokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd];
            dproj[(i * b_vis + j) * dd..(i * b_vis + j + 1) * dd].copy_from_slice(dt);
        }
    }

    let dlatents = linear_bwd(
        &fwd.latents,
        &p.dec_proj_w,
        &dproj,
        n * b_vis,
        &mut grads.dec_proj_w,
        &mut grads.dec_proj_b,
    );
    let denc_in = block_bwd(
        &p.enc_block,
        &fwd.enc_cache,
        &dlatents,
        n,
        b_vis,
        &mut grads.enc_block,
    );

    let de = dims.d_enc;
    for i in 0..n {
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            let dt = &denc_in[(i * b_vis + j) * de..(i * b_vis + j + 1) * de];
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
        &p.embed_w,
        &denc_in,
        n * b_vis,
        &mut grads.embed_w,
        &mut grads.embed_b,
    );
}

/// Encoder applied to the visible patches only; returns [n, b, d_enc].
pub fn encode_visible(p: &MaeParams, patches: &PatchSequence, plan: &MaskPlan) -> Result<Tensor> {
    let fwd = mae_forward(p, patches, plan)?;
    Tensor::from_vec(&[fwd.n, fwd.visible, p.dims.d_enc], fwd.latents)
}

/// Decoder applied to encoder latents; returns the full [n, B, patch_dim]
/// reconstruction regardless of how many patches were visible.
pub fn decode_full(
    p: &MaeParams,
    latents: &Tensor,
    plan: &MaskPlan,
    geom: crate::data::Geometry,
) -> Result<PatchSequence> {
    let shape = latents.shape();
    if shape.len() != 3 || shape[2] != p.dims.d_enc {
        return Err(Error::Shape(format!(
            "latents {:?} do not match d_enc {}",
            shape, p.dims.d_enc
        )));
    }
    if geom.num_patches() != p.dims.num_patches || geom.patch_dim() != p.dims.patch_dim {
        return Err(Error::Shape("geometry does not match model dims".into()));
    }
    let (n, b_vis) = (shape[0], shape[1]);
    if plan.n() != n || plan.uniform_visible() != Some(b_vis) {
        return Err(Error::Shape("mask plan does not match latents".into()));
    }
    let dims = &p.dims;
    let (bb, dd) = (dims.num_patches, dims.d_dec);

    let proj = linear_fwd(latents.data(), &p.dec_proj_w, &p.dec_proj_b, n * b_vis);
    let mut tokens = vec![0.0; n * bb * dd];
    for i in 0..n {
        for patch in 0..bb {
            tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd]
                .copy_from_slice(p.mask_token.data());
        }
        for (j, &patch) in plan.visible[i].iter().enumerate() {
            tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd]
                .copy_from_slice(&proj[(i * b_vis + j) * dd..(i * b_vis + j + 1) * dd]);
        }
        for patch in 0..bb {
            let tok = &mut tokens[(i * bb + patch) * dd..(i * bb + patch + 1) * dd];
            for (t, &e) in tok.iter_mut().zip(p.dec_pos.row(patch)) {
                *t += e;
            }
        }
    }
    let (dec_out, _) = block_fwd(&p.dec_block, &tokens, n, bb);
    let recon = linear_fwd(&dec_out, &p.head_w, &p.head_b, n * bb);
    Ok(PatchSequence {
        n,
        geom,
        data: recon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// MSE over masked-position pixels only (standard MAE training target).
    MaskedOnly,
    /// MSE over every pixel.
    All,
}

/// 1/2 mean squared error over the pixels selected by `mode`.
pub fn masked_recon_loss(
    recon: &[f64],
    target: &PatchSequence,
    plan: &MaskPlan,
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    let (n, bb, pd) = (target.n, target.num_patches(), target.patch_dim());
    if recon.len() != target.data.len() {
        return Err(Error::Shape("reconstruction does not match target".into()));
    }
    if plan.n() != n || plan.num_patches != bb {
        return Err(Error::Shape("mask plan does not match target".into()));
    }
    match mode {
        LossMode::All => {
            let count = n * bb * pd;
            Ok(half_mse_selected(recon, &target.data, |_| true, count))
        }
        LossMode::MaskedOnly => {
            let masked_patches = plan.masked_count();
            if masked_patches == 0 {
                return Err(Error::Invalid(
                    "masked-only loss undefined: plan has no masked patches".into(),
                ));
            }
            let count = masked_patches * pd;
            Ok(half_mse_selected(
                recon,
                &target.data,
                |idx| {
                    let patch_idx = idx / pd;
                    !plan.is_visible(patch_idx / bb, patch_idx % bb)
                },
                count,
            ))
        }
    }
}

/// Loss + gradients in one pass; the workhorse for training and grad checks.
pub fn mae_loss_and_grads(
    p: &MaeParams,
    patches: &PatchSequence,
    plan: &MaskPlan,
    mode: LossMode,
) -> Result<(f64, MaeParams)> {
    let fwd = mae_forward(p, patches, plan)?;
    let (loss, drecon) = masked_recon_loss(&fwd.recon, patches, plan, mode)?;
    let mut grads = p.zeros_like();
    mae_backward(p, plan, &fwd, &drecon, &mut grads);
    Ok((loss, grads))
}

/// One training step: sample a fresh fixed-count mask from `rng`, forward,
/// masked-only loss, backward, Adam update.
pub fn train_step(
    p: &mut MaeParams,
    opt: &mut OptimizerState,
    batch: &PatchSequence,
    mask_ratio: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if batch.n == 0 {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let plan = crate::data::sample_mask(
        batch.n,
        batch.num_patches(),
        mask_ratio,
        MaskSemantics::FixedCount,
        rng,
    )?;
    let (loss, grads) = mae_loss_and_grads(p, batch, &plan, LossMode::MaskedOnly)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at optimizer step {}",
            opt.step_count + 1
        )));
    }
    opt.step(p, &grads);
    Ok(loss)
}

/// Interference Delta-z: encoder features of the clean full sequence minus
/// encoder features of the zero-filled corrupted sequence. Both runs see all
/// B tokens; the corruption only zeroes patch pixels before embedding.
pub fn feature_interference(
    p: &MaeParams,
    patches: &PatchSequence,
    plan: &MaskPlan,
) -> Result<Tensor> {
    let all_visible = MaskPlan::from_visible(
        patches.num_patches(),
        MaskSemantics::FixedCount,
        0.0,
        (0..patches.n)
            .map(|_| (0..patches.num_patches()).collect())
            .collect(),
    );
    let z = encode_visible(p, patches, &all_visible)?;
    let corrupted = apply_mask_zero(patches, plan)?;
    let z_tilde = encode_visible(p, &corrupted, &all_visible)?;
    let data: Vec<f64> = z
        .data()
        .iter()
        .zip(z_tilde.data())
        .map(|(a, b)| a - b)
        .collect();
    Tensor::from_vec(z.shape(), data)
}
