//! Images, patch sequences, mask plans and the synthetic dataset.
//!
//! Patch layout is pinned: patches are ordered row-major over the patch grid,
//! and within a patch the pixels are flattened channel-major then row-major.
//! Checkpoints and dataset files rely on this order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Geometry {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Invalid(format!(
                "image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// [n, channels, height, width], values in [0, 1].
    pub pixels: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
}

impl ImageBatch {
    pub fn image(&self, i: usize) -> &[f64] {
        let sz = self.channels * self.height * self.width;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    /// Rows `indices` of this batch as a new batch.
    pub fn subset(&self, indices: &[usize]) -> ImageBatch {
        let sz = self.channels * self.height * self.width;
        let mut pixels = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageBatch {
            n: indices.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels,
            n_classes: self.n_classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub n: usize,
    pub geom: Geometry,
    /// [n, B, patch_dim].
    pub data: Vec<f64>,
}

impl PatchSequence {
    pub fn num_patches(&self) -> usize {
        self.geom.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.geom.patch_dim()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let sz = self.num_patches() * self.patch_dim();
        &self.data[i * sz..(i + 1) * sz]
    }

    pub fn subset(&self, indices: &[usize]) -> PatchSequence {
        let sz = self.num_patches() * self.patch_dim();
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        PatchSequence {
            n: indices.len(),
            geom: self.geom,
            data,
        }
    }
}

pub fn patchify(images: &ImageBatch, patch: usize) -> Result<PatchSequence> {
    let geom = Geometry {
        channels: images.channels,
        height: images.height,
        width: images.width,
        patch,
    };
    geom.validate()?;
    let grid_w = images.width / patch;
    let grid_h = images.height / patch;
    let pd = geom.patch_dim();
    let b = geom.num_patches();
    let mut data = vec![0.0; images.n * b * pd];
    let hw = images.height * images.width;
    for i in 0..images.n {
        let img = images.image(i);
        for pr in 0..grid_h {
            for pc in 0..grid_w {
                let pidx = pr * grid_w + pc;
                let out = &mut data[(i * b + pidx) * pd..(i * b + pidx + 1) * pd];
                let mut o = 0;
                for ch in 0..images.channels {
                    for py in 0..patch {
                        let row = (pr * patch + py) * images.width + pc * patch;
                        for px in 0..patch {
                            out[o] = img[ch * hw + row + px];
                            o += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        n: images.n,
        geom,
        data,
    })
}

pub fn unpatchify(patches: &PatchSequence) -> Result<ImageBatch> {
    let geom = patches.geom;
    geom.validate()?;
    let grid_w = geom.width / geom.patch;
    let grid_h = geom.height / geom.patch;
    let pd = geom.patch_dim();
    let b = geom.num_patches();
    if patches.data.len() != patches.n * b * pd {
        return Err(Error::Shape("patch buffer does not match geometry".into()));
    }
    let hw = geom.height * geom.width;
    let mut pixels = vec![0.0; patches.n * geom.channels * hw];
    for i in 0..patches.n {
        let img = &mut pixels[i * geom.channels * hw..(i + 1) * geom.channels * hw];
        for pr in 0..grid_h {
            for pc in 0..grid_w {
                let pidx = pr * grid_w + pc;
                let src = patches.sample(i);
                let pat = &src[pidx * pd..(pidx + 1) * pd];
                let mut o = 0;
                for ch in 0..geom.channels {
                    for py in 0..geom.patch {
                        let row = (pr * geom.patch + py) * geom.width + pc * geom.patch;
                        for px in 0..geom.patch {
                            img[ch * hw + row + px] = pat[o];
                            o += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(ImageBatch {
        n: patches.n,
        channels: geom.channels,
        height: geom.height,
        width: geom.width,
        pixels,
        labels: None,
        n_classes: 0,
    })
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSemantics {
    /// Exactly b visible patches per sample.
    FixedCount,
    /// Each patch masked independently with probability p.
    Bernoulli,
}

#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub num_patches: usize,
    pub semantics: MaskSemantics,
    pub ratio: f64,
    /// Per sample: sorted visible patch indices.
    pub visible: Vec<Vec<usize>>,
    /// [n * B] visibility bitmap.
    vis_map: Vec<bool>,
}

impl MaskPlan {
    pub fn from_visible(num_patches: usize, semantics: MaskSemantics, ratio: f64, visible: Vec<Vec<usize>>) -> Self {
        let n = visible.len();
        let mut vis_map = vec![false; n * num_patches];
        for (i, vis) in visible.iter().enumerate() {
            for &p in vis {
                vis_map[i * num_patches + p] = true;
            }
        }
        MaskPlan {
            num_patches,
            semantics,
            ratio,
            visible,
            vis_map,
        }
    }

    pub fn n(&self) -> usize {
        self.visible.len()
    }

    pub fn is_visible(&self, sample: usize, patch: usize) -> bool {
        self.vis_map[sample * self.num_patches + patch]
    }

    pub fn visible_count(&self, sample: usize) -> usize {
        self.visible[sample].len()
    }

    pub fn masked_count(&self) -> usize {
        self.vis_map.iter().filter(|&&v| !v).count()
    }

    /// True when every sample has the same visible count.
    pub fn uniform_visible(&self) -> Option<usize> {
        let b = self.visible.first()?.len();
        self.visible.iter().all(|v| v.len() == b).then_some(b)
    }
}

/// Visible count used by fixed-count plans: round((1-p) * B).
pub fn fixed_visible_count(num_patches: usize, p: f64) -> usize {
    ((1.0 - p) * num_patches as f64).round() as usize
}

pub fn sample_mask(
    n: usize,
    num_patches: usize,
    p: f64,
    semantics: MaskSemantics,
    rng: &mut RngStream,
) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid(format!("mask ratio p={p} outside [0, 1)")));
    }
    let visible = match semantics {
        MaskSemantics::FixedCount => {
            let b = fixed_visible_count(num_patches, p);
            if b == 0 {
                return Err(Error::Invalid(format!(
                    "p={p} leaves zero visible patches of {num_patches}; the encoder needs at least one"
                )));
            }
            (0..n)
                .map(|_| {
                    let mut vis = rng.choose_k(num_patches, b);
                    vis.sort_unstable();
                    vis
                })
                .collect()
        }
        MaskSemantics::Bernoulli => (0..n)
            .map(|_| {
                (0..num_patches)
                    .filter(|_| rng.next_f64() >= p)
                    .collect::<Vec<_>>()
            })
            .collect(),
    };
    Ok(MaskPlan::from_visible(num_patches, semantics, p, visible))
}

/// The corruption x-tilde: masked patches zeroed, visible untouched.
pub fn apply_mask_zero(patches: &PatchSequence, plan: &MaskPlan) -> Result<PatchSequence> {
    let b = patches.num_patches();
    if plan.num_patches != b || plan.n() != patches.n {
        return Err(Error::Shape(format!(
            "mask plan for {}x{} patches does not fit sequence {}x{}",
            plan.n(),
            plan.num_patches,
            patches.n,
            b
        )));
    }
    let pd = patches.patch_dim();
    let mut out = patches.clone();
    for i in 0..patches.n {
        for patch in 0..b {
            if !plan.is_visible(i, patch) {
                out.data[(i * b + patch) * pd..(i * b + patch + 1) * pd].fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Analytic upper bound on distinct fixed-count corruptions: n * C(B, b).
pub fn count_mask_variants(n: u64, num_patches: u64, visible: u64) -> Result<u64> {
    if visible > num_patches {
        return Err(Error::Invalid(format!(
            "visible count {visible} exceeds patch count {num_patches}"
        )));
    }
    let c = binomial_checked(num_patches, visible)
        .ok_or_else(|| Error::Overflow(format!("C({num_patches}, {visible})")))?;
    n.checked_mul(c)
        .ok_or_else(|| Error::Overflow(format!("{n} * C({num_patches}, {visible})")))
}

fn binomial_checked(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k.min(n));
    let mut acc: u64 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1), kept exact: (i+1) always divides acc*(n-i).
        acc = acc.checked_mul(n - i)?;
        acc /= i + 1;
    }
    Some(acc)
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Class templates: mid-gray background with an oriented bar and a dark blob
/// whose angle/position are class-specific. Pixel range stays inside (0, 1)
/// so moderate noise keeps the nearest-template problem learnable without
/// saturating everything at the clamp.
pub fn synth_templates(n_classes: usize, height: usize, width: usize) -> Vec<Vec<f64>> {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let side = height.min(width) as f64;
    let bar_sigma = side / 6.0;
    let blob_sigma = side / 6.0;
    let orbit = side / 3.2;
    let amp = 0.38;
    (0..n_classes)
        .map(|c| {
            let theta = std::f64::consts::PI * c as f64 / n_classes as f64;
            let (dir_x, dir_y) = (theta.cos(), theta.sin());
            let phi = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64
                + std::f64::consts::PI / n_classes as f64;
            let bx = cx + orbit * phi.cos();
            let by = cy + orbit * phi.sin();
            let mut img = vec![0.5; height * width];
            for y in 0..height {
                for x in 0..width {
                    let fx = x as f64 - cx;
                    let fy = y as f64 - cy;
                    // distance from the line through the center along (dir_x, dir_y)
                    let line_d = (fx * dir_y - fy * dir_x).abs();
                    let bar = amp * (-(line_d * line_d) / (2.0 * bar_sigma * bar_sigma)).exp();
                    let dbx = x as f64 - bx;
                    let dby = y as f64 - by;
                    let blob = amp
                        * (-(dbx * dbx + dby * dby) / (2.0 * blob_sigma * blob_sigma)).exp();
                    img[y * width + x] = (0.5 + bar - blob).clamp(0.05, 0.95);
                }
            }
            img
        })
        .collect()
}

/// Procedurally generated labeled images: per-class template plus pixel
/// noise, clamped to [0, 1]. Grayscale, class-major sample order.
pub fn synth_dataset(
    n_per_class: usize,
    n_classes: usize,
    height: usize,
    width: usize,
    noise: f64,
    rng: &mut RngStream,
) -> Result<ImageBatch> {
    if n_classes < 2 {
        return Err(Error::Invalid("synthetic dataset needs at least 2 classes".into()));
    }
    let templates = synth_templates(n_classes, height, width);
    let n = n_per_class * n_classes;
    let mut pixels = Vec::with_capacity(n * height * width);
    let mut labels = Vec::with_capacity(n);
    for (c, template) in templates.iter().enumerate() {
        let mut class_rng = rng.derive("class", c as u64);
        for _ in 0..n_per_class {
            for &t in template {
                pixels.push((t + noise * class_rng.normal()).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Ok(ImageBatch {
        n,
        channels: 1,
        height,
        width,
        pixels,
        labels: Some(labels),
        n_classes,
    })
}

/// Deterministic stratified train/test split. Each class contributes
/// round(test_fraction * count) samples (at least 1) to the test set.
pub fn stratified_split(
    images: &ImageBatch,
    test_fraction: f64,
    rng: &mut RngStream,
) -> Result<(ImageBatch, ImageBatch)> {
    let labels = images
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("stratified split needs labels".into()))?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); images.n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for pool in by_class.iter_mut() {
        if pool.is_empty() {
            continue;
        }
        rng.shuffle(pool);
        let take = if test_fraction == 0.0 {
            0
        } else {
            ((test_fraction * pool.len() as f64).round() as usize).clamp(1, pool.len() - 1)
        };
        test_idx.extend_from_slice(&pool[..take]);
        train_idx.extend_from_slice(&pool[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((images.subset(&train_idx), images.subset(&test_idx)))
}

/// Nearest-template classification accuracy; the independent oracle for the
/// synthetic data generator.
pub fn nearest_template_accuracy(images: &ImageBatch, templates: &[Vec<f64>]) -> f64 {
    let labels = images.labels.as_ref().expect("labeled batch");
    let mut correct = 0usize;
    for i in 0..images.n {
        let img = images.image(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, t) in templates.iter().enumerate() {
            let d: f64 = img.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / images.n as f64
}

// ---------------------------------------------------------------------------
// Dataset file: key=value manifest, then f32 pixels, then i32 labels
// ---------------------------------------------------------------------------

pub fn save_dataset(images: &ImageBatch, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let n_cls = if images.labels.is_some() { images.n_classes } else { 0 };
    let manifest = format!(
        "version=1\nn={}\nchannels={}\nH={}\nW={}\nN_cls={}\n\n",
        images.n, images.channels, images.height, images.width, n_cls
    );
    let io = |e| Error::io(path, e);
    w.write_all(manifest.as_bytes()).map_err(io)?;
    for &px in &images.pixels {
        w.write_all(&(px as f32).to_le_bytes()).map_err(io)?;
    }
    if let Some(labels) = &images.labels {
        for &l in labels {
            w.write_all(&(l as i32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<ImageBatch> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Parse(format!("{}: missing manifest terminator", path.display())))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Parse(format!("{}: manifest is not UTF-8", path.display())))?;

    let mut kv = std::collections::BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("{}: bad manifest line {line:?}", path.display())))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<usize> {
        kv.get(key)
            .ok_or_else(|| Error::Parse(format!("{}: manifest missing {key}", path.display())))?
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad value for {key}", path.display())))
    };
    if get("version")? != 1 {
        return Err(Error::Parse(format!("{}: unsupported version", path.display())));
    }
    let (n, channels, height, width, n_cls) =
        (get("n")?, get("channels")?, get("H")?, get("W")?, get("N_cls")?);

    let mut off = header_end + 2;
    let n_pix = n * channels * height * width;
    let need = n_pix * 4 + if n_cls > 0 { n * 4 } else { 0 };
    if bytes.len() - off < need {
        return Err(Error::Parse(format!(
            "{}: truncated payload ({} bytes, need {need})",
            path.display(),
            bytes.len() - off
        )));
    }
    let mut pixels = Vec::with_capacity(n_pix);
    for _ in 0..n_pix {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("length checked"));
        pixels.push(v as f64);
        off += 4;
    }
    let labels = if n_cls > 0 {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            let v = i32::from_le_bytes(bytes[off..off + 4].try_into().expect("length checked"));
            if v < 0 || v as usize >= n_cls {
                return Err(Error::Parse(format!("{}: label {v} outside [0, {n_cls})", path.display())));
            }
            l.push(v as usize);
            off += 4;
        }
        Some(l)
    } else {
        None
    };
    Ok(ImageBatch {
        n,
        channels,
        height,
        width,
        pixels,
        labels,
        n_classes: n_cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, c: usize, h: usize, w: usize, rng: &mut RngStream) -> ImageBatch {
        let mut pixels = vec![0.0; n * c * h * w];
        for p in pixels.iter_mut() {
            *p = rng.next_f64();
        }
        ImageBatch {
            n,
            channels: c,
            height: h,
            width: w,
            pixels,
            labels: None,
            n_classes: 0,
        }
    }

    #[test]
    fn patchify_geometry() {
        let mut rng = RngStream::new(1);
        let img = random_batch(1, 1, 4, 4, &mut rng);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.num_patches(), 4);
        assert_eq!(p.patch_dim(), 4);

        let img = random_batch(2, 3, 16, 16, &mut rng);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.num_patches(), 16);
        assert_eq!(p.patch_dim(), 48);
    }

    #[test]
    fn patchify_rejects_bad_dims() {
        let mut rng = RngStream::new(1);
        let img = random_batch(1, 1, 5, 4, &mut rng);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn patch_content_is_row_major_channel_major() {
        // 1x1x4x4 image with pixel value = linear index.
        let pixels: Vec<f64> = (0..16).map(|x| x as f64).collect();
        let img = ImageBatch {
            n: 1,
            channels: 1,
            height: 4,
            width: 4,
            pixels,
            labels: None,
            n_classes: 0,
        };
        let p = patchify(&img, 2).unwrap();
        // patch (0,0): rows 0-1, cols 0-1
        assert_eq!(&p.data[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // patch (0,1): rows 0-1, cols 2-3
        assert_eq!(&p.data[4..8], &[2.0, 3.0, 6.0, 7.0]);
        // patch (1,0): rows 2-3, cols 0-1
        assert_eq!(&p.data[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn round_trip_exact() {
        let mut rng = RngStream::new(2);
        let img = random_batch(2, 3, 8, 8, &mut rng);
        let back = unpatchify(&patchify(&img, 4).unwrap()).unwrap();
        assert_eq!(img.pixels, back.pixels);

        // single-patch image: the patch equals the image
        let one = random_batch(1, 1, 2, 2, &mut rng);
        let p = patchify(&one, 2).unwrap();
        assert_eq!(p.num_patches(), 1);
        assert_eq!(p.data, one.pixels);
    }

    #[test]
    fn fixed_count_mask_counts() {
        let mut rng = RngStream::new(3);
        let plan = sample_mask(8, 16, 0.75, MaskSemantics::FixedCount, &mut rng).unwrap();
        for i in 0..8 {
            assert_eq!(plan.visible_count(i), 4);
        }
        // p = 0: everything visible
        let plan = sample_mask(2, 16, 0.0, MaskSemantics::FixedCount, &mut rng).unwrap();
        assert_eq!(plan.masked_count(), 0);
    }

    #[test]
    fn mask_determinism() {
        let root = RngStream::new(5);
        let mut a = root.derive("mask", 1);
        let mut b = root.derive("mask", 1);
        let pa = sample_mask(4, 16, 0.75, MaskSemantics::FixedCount, &mut a).unwrap();
        let pb = sample_mask(4, 16, 0.75, MaskSemantics::FixedCount, &mut b).unwrap();
        assert_eq!(pa.visible, pb.visible);
    }

    #[test]
    fn zero_visible_is_error() {
        let mut rng = RngStream::new(5);
        assert!(sample_mask(1, 4, 0.99, MaskSemantics::FixedCount, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_zeroes_masked_patches_only() {
        let mut rng = RngStream::new(7);
        let img = random_batch(2, 1, 4, 4, &mut rng);
        let patches = patchify(&img, 2).unwrap();
        let plan = sample_mask(2, 4, 0.5, MaskSemantics::FixedCount, &mut rng).unwrap();
        let corrupted = apply_mask_zero(&patches, &plan).unwrap();
        let pd = 4;
        for i in 0..2 {
            for b in 0..4 {
                let src = &patches.data[(i * 4 + b) * pd..(i * 4 + b + 1) * pd];
                let dst = &corrupted.data[(i * 4 + b) * pd..(i * 4 + b + 1) * pd];
                if plan.is_visible(i, b) {
                    assert_eq!(src, dst);
                } else {
                    assert!(dst.iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn mask_energy_ratio_matches_keep_rate() {
        // Monte Carlo: ||x_tilde||^2 / ||x||^2 ~ (1 - p) for iid pixels.
        let mut rng = RngStream::new(11);
        let img = random_batch(10, 1, 8, 8, &mut rng);
        let patches = patchify(&img, 2).unwrap();
        let total = patches.data.iter().map(|x| x * x).sum::<f64>();
        let p = 0.75;
        let mut acc = 0.0;
        let trials = 100;
        for t in 0..trials {
            let mut mrng = rng.derive("trial", t);
            let plan = sample_mask(10, 16, p, MaskSemantics::Bernoulli, &mut mrng).unwrap();
            let corrupted = apply_mask_zero(&patches, &plan).unwrap();
            acc += corrupted.data.iter().map(|x| x * x).sum::<f64>() / total;
        }
        let mean = acc / trials as f64;
        assert!((mean - (1.0 - p)).abs() < 0.05, "mean={mean}");
    }

    #[test]
    fn variant_counts() {
        assert_eq!(count_mask_variants(1, 4, 1).unwrap(), 4);
        assert_eq!(count_mask_variants(10, 6, 3).unwrap(), 200);
        assert_eq!(count_mask_variants(1, 12, 6).unwrap(), 924);
        assert!(count_mask_variants(u64::MAX, 6, 3).is_err());
        assert!(count_mask_variants(1, 4, 5).is_err());
    }

    #[test]
    fn variant_count_matches_enumeration() {
        // Enumerate all b-subsets of B patches for B <= 8 here (the
        // acceptance suite covers B <= 12).
        for b_total in 1..=8u64 {
            for b in 0..=b_total {
                let mut count = 0u64;
                for mask in 0..(1u64 << b_total) {
                    if mask.count_ones() as u64 == b {
                        count += 1;
                    }
                }
                assert_eq!(count_mask_variants(1, b_total, b).unwrap(), count);
            }
        }
    }

    #[test]
    fn synth_noise_free_is_template_exact() {
        let mut rng = RngStream::new(13);
        let ds = synth_dataset(5, 4, 16, 16, 0.0, &mut rng).unwrap();
        let templates = synth_templates(4, 16, 16);
        assert_eq!(nearest_template_accuracy(&ds, &templates), 1.0);
    }

    #[test]
    fn synth_noisy_is_between_chance_and_perfect() {
        let mut rng = RngStream::new(13);
        let ds = synth_dataset(100, 4, 16, 16, 0.5, &mut rng).unwrap();
        let templates = synth_templates(4, 16, 16);
        let acc = nearest_template_accuracy(&ds, &templates);
        assert!(acc > 0.25 && acc < 1.0, "acc={acc}");
    }

    #[test]
    fn synth_seeds_differ_structure_stays() {
        let mut a = RngStream::new(1);
        let mut b = RngStream::new(2);
        let da = synth_dataset(3, 2, 8, 8, 0.3, &mut a).unwrap();
        let db = synth_dataset(3, 2, 8, 8, 0.3, &mut b).unwrap();
        assert_ne!(da.pixels, db.pixels);
        assert_eq!(da.labels, db.labels);
    }

    #[test]
    fn dataset_file_round_trip() {
        let mut rng = RngStream::new(21);
        let ds = synth_dataset(3, 2, 8, 8, 0.2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ds");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.n, ds.n);
        assert_eq!(back.labels, ds.labels);
        // f32 narrowing is the only loss
        for (a, b) in ds.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
        // loading and saving again is byte-identical
        let path2 = dir.path().join("toy2.ds");
        save_dataset(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
