//! Dataset ingestion, domain splitting and the synthetic two-domain corpus
//! used by tests and desk-scale runs.
//!
//! Directory datasets follow the `root/<class_name>/<file>` layout and decode
//! PNG plus a raw little-endian f32 tensor format (`.ten`), so fixtures need
//! no codec. All loaders are pure given (path, seed).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const RAW_TENSOR_MAGIC: &[u8; 4] = b"TEN1";

/// One decoded image: `[C, H, W]` pixels in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageRecord<F> {
    pub pixels: Tensor<F>,
    pub class_id: usize,
    pub origin: String,
}

#[derive(Clone, Debug)]
pub struct Dataset<F> {
    records: Vec<ImageRecord<F>>,
    class_names: Vec<String>,
}

impl<F: Real> Dataset<F> {
    pub fn from_records(records: Vec<ImageRecord<F>>, class_names: Vec<String>) -> Result<Self> {
        for r in &records {
            if r.class_id >= class_names.len() {
                return Err(Error::Data(format!(
                    "record {} has class id {} but only {} classes are named",
                    r.origin,
                    r.class_id,
                    class_names.len()
                )));
            }
            if r.pixels.iter().any(|v| v.as_f64() < 0.0 || v.as_f64() > 1.0) {
                return Err(Error::Data(format!("record {} has pixels outside [0,1]", r.origin)));
            }
        }
        Ok(Dataset { records, class_names })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord<F>] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &ImageRecord<F> {
        &self.records[i]
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Record indices per class, in record order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_names.len()];
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.class_id].push(i);
        }
        by_class
    }
}

/// The target-side domain split: the unlabeled pool feeding representation
/// learning and the evaluation pool feeding episodes, disjoint by
/// construction.
#[derive(Clone, Debug)]
pub struct DomainSplit<F> {
    pub unlabeled: Dataset<F>,
    pub evaluation: Dataset<F>,
}

// ── Folder loading ───────────────────────────────────────────────────────

/// Load a class-per-directory dataset with deterministic lexicographic
/// ordering of both classes and files.
pub fn load_folder<F: Real>(root: &Path) -> Result<Dataset<F>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut records = Vec::new();
    let mut class_names = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && !p.file_name().unwrap_or_default().to_string_lossy().starts_with('.')
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for file in files {
            let pixels = decode_image::<F>(&file)?;
            records.push(ImageRecord {
                pixels,
                class_id,
                origin: file.to_string_lossy().to_string(),
            });
        }
        class_names.push(name);
    }
    Dataset::from_records(records, class_names)
}

fn decode_image<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => {
            let img = image::open(path)
                .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = vec![F::zero(); 3 * h * w];
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    data[c * h * w + y as usize * w + x as usize] =
                        F::from_f64(px.0[c] as f64 / 255.0);
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
        "ten" => read_raw_tensor(path),
        other => Err(Error::Data(format!(
            "cannot decode {}: unsupported extension {other:?}",
            path.display()
        ))),
    }
}

/// Raw tensor file: magic, u32 rank, u32 extents, little-endian f32 payload.
pub fn read_raw_tensor<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let fail = |what: &str| Error::Data(format!("cannot decode {}: {what}", path.display()));
    if buf.len() < 8 || &buf[0..4] != RAW_TENSOR_MAGIC {
        return Err(fail("bad magic"));
    }
    let rank = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if buf.len() < header {
        return Err(fail("truncated header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if buf.len() != header + 4 * numel {
        return Err(fail("payload length does not match shape"));
    }
    let data = buf[header..]
        .chunks_exact(4)
        .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))
}

pub fn write_raw_tensor<F: Real>(path: &Path, tensor: &Tensor<F>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    buf.extend_from_slice(RAW_TENSOR_MAGIC);
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.iter() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

// ── Domain split ─────────────────────────────────────────────────────────

/// Stratified split of the target dataset: per class, `round(fraction * n)`
/// samples go to the unlabeled pool, the rest are reserved for evaluation.
pub fn split_target<F: Real>(
    dataset: &Dataset<F>,
    fraction: f64,
    seed: u64,
) -> Result<DomainSplit<F>> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::Parameter(format!("split fraction must be in (0,1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unlabeled = Vec::new();
    let mut evaluation = Vec::new();
    for (class_id, mut idxs) in dataset.class_indices().into_iter().enumerate() {
        if idxs.len() < 2 {
            return Err(Error::Data(format!(
                "class {:?} has {} samples; need at least 2 to split",
                dataset.class_names()[class_id],
                idxs.len()
            )));
        }
        idxs.shuffle(&mut rng);
        let k = ((fraction * idxs.len() as f64).round() as usize).clamp(1, idxs.len() - 1);
        for (pos, &i) in idxs.iter().enumerate() {
            let rec = dataset.record(i).clone();
            if pos < k {
                unlabeled.push(rec);
            } else {
                evaluation.push(rec);
            }
        }
    }
    Ok(DomainSplit {
        unlabeled: Dataset::from_records(unlabeled, dataset.class_names().to_vec())?,
        evaluation: Dataset::from_records(evaluation, dataset.class_names().to_vec())?,
    })
}

/// Audit trail of a split: one `path<TAB>pool` line per record.
pub fn split_manifest<F: Real>(split: &DomainSplit<F>) -> String {
    let mut out = String::new();
    for r in split.unlabeled.records() {
        out.push_str(&format!("{}\tunlabeled\n", r.origin));
    }
    for r in split.evaluation.records() {
        out.push_str(&format!("{}\tevaluation\n", r.origin));
    }
    out
}

// ── Synthetic two-domain corpus ──────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTransform {
    /// Target domain identical to the base domain.
    Identity,
    /// Target pixels are `1 - v`.
    Invert,
    /// Target channels rotate R->G->B->R.
    ChannelRoll,
}

/// Generator for separable class blobs rendered as images. Classes sit on a
/// ring of Gaussian bumps with class-specific channel intensities; the two
/// domains differ by `transform`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class_base: usize,
    pub per_class_target: usize,
    pub resolution: usize,
    pub blob_sigma: f64,
    /// Uniform jitter of the blob center, in pixels.
    pub center_jitter: f64,
    pub noise_std: f64,
    pub transform: DomainTransform,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            per_class_base: 24,
            per_class_target: 24,
            resolution: 16,
            blob_sigma: 1.6,
            center_jitter: 0.5,
            noise_std: 0.02,
            transform: DomainTransform::Invert,
            seed: 0,
        }
    }
}

pub fn synth_generate<F: Real>(spec: &SyntheticSpec) -> Result<(Dataset<F>, Dataset<F>)> {
    if spec.classes == 0 || spec.resolution < 4 {
        return Err(Error::Parameter("synthetic spec needs classes >= 1 and resolution >= 4".into()));
    }
    let base = synth_domain(spec, false, spec.seed)?;
    let target = synth_domain(spec, true, spec.seed.wrapping_add(0x51ab_5eed))?;
    Ok((base, target))
}

fn synth_domain<F: Real>(spec: &SyntheticSpec, target: bool, seed: u64) -> Result<Dataset<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = spec.resolution;
    let per_class = if target { spec.per_class_target } else { spec.per_class_base };
    let ring = res as f64 / 3.2;
    let mid = (res as f64 - 1.0) / 2.0;
    let mut records = Vec::new();
    let mut names = Vec::new();
    for c in 0..spec.classes {
        names.push(format!("class_{c:02}"));
        let angle = std::f64::consts::TAU * c as f64 / spec.classes as f64;
        let (cy0, cx0) = (mid + ring * angle.sin(), mid + ring * angle.cos());
        // Channel intensity pattern cycles through 6 distinct profiles.
        let amp = |ch: usize| 0.45 + 0.55 * (((c + 2 * ch) % 3) as f64 / 2.0);
        for s in 0..per_class {
            let cy = cy0 + spec.center_jitter * (2.0 * rng.random::<f64>() - 1.0);
            let cx = cx0 + spec.center_jitter * (2.0 * rng.random::<f64>() - 1.0);
            let mut data = vec![F::zero(); 3 * res * res];
            for ch in 0..3 {
                for y in 0..res {
                    for x in 0..res {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let mut v = amp(ch) * (-d2 / (2.0 * spec.blob_sigma.powi(2))).exp();
                        if spec.noise_std > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            v += spec.noise_std * z;
                        }
                        if target {
                            v = match spec.transform {
                                DomainTransform::Identity => v,
                                DomainTransform::Invert => 1.0 - v,
                                DomainTransform::ChannelRoll => v,
                            };
                        }
                        data[ch * res * res + y * res + x] = F::from_f64(v.clamp(0.0, 1.0));
                    }
                }
            }
            if target && spec.transform == DomainTransform::ChannelRoll {
                let plane = res * res;
                let mut rolled = vec![F::zero(); 3 * plane];
                for ch in 0..3 {
                    rolled[((ch + 1) % 3) * plane..((ch + 1) % 3) * plane + plane]
                        .copy_from_slice(&data[ch * plane..(ch + 1) * plane]);
                }
                data = rolled;
            }
            let domain = if target { "target" } else { "base" };
            records.push(ImageRecord {
                pixels: Tensor::new(vec![3, res, res], data)?,
                class_id: c,
                origin: format!("synthetic://{domain}/class_{c:02}/{s:04}"),
            });
        }
    }
    Dataset::from_records(records, names)
}

// ── Geometry and normalization ───────────────────────────────────────────

/// Bilinear sample of a crop box resized to `out_h x out_w`. The crop box is
/// given in pixel units; `crop_h`/`crop_w` of the full image with offset 0 is
/// a plain resize. Sampling uses pixel-center alignment.
pub fn crop_resize<F: Real>(
    img: &Tensor<F>,
    crop_y: usize,
    crop_x: usize,
    crop_h: usize,
    crop_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<F>> {
    let [c, h, w] = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::Shape(format!("crop_resize expects [C,H,W], got {other:?}"))),
    };
    if crop_h == 0 || crop_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Parameter("crop and output extents must be positive".into()));
    }
    if crop_y + crop_h > h || crop_x + crop_w > w {
        return Err(Error::Data(format!(
            "crop {crop_y}+{crop_h} x {crop_x}+{crop_w} exceeds image {h}x{w}"
        )));
    }
    let src = img.data();
    let mut out = vec![F::zero(); c * out_h * out_w];
    let sy_scale = crop_h as f64 / out_h as f64;
    let sx_scale = crop_w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = (crop_y as f64 + (oy as f64 + 0.5) * sy_scale - 0.5)
            .clamp(crop_y as f64, (crop_y + crop_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(crop_y + crop_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = (crop_x as f64 + (ox as f64 + 0.5) * sx_scale - 0.5)
                .clamp(crop_x as f64, (crop_x + crop_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(crop_x + crop_w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| src[ch * h * w + y * w + x].as_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[ch * out_h * out_w + oy * out_w + ox] =
                    F::from_f64(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn normalize<F: Real>(img: &Tensor<F>, mean: &[f64], std: &[f64]) -> Result<Tensor<F>> {
    let [c, h, w] = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::Shape(format!("normalize expects [C,H,W], got {other:?}"))),
    };
    if mean.len() != c || std.len() != c {
        return Err(Error::Parameter(format!(
            "normalization constants cover {} channels, image has {c}",
            mean.len()
        )));
    }
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Parameter("normalization std must be positive".into()));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let m = F::from_f64(mean[ch]);
        let s = F::from_f64(1.0 / std[ch]);
        for &v in &img.data()[ch * h * w..(ch + 1) * h * w] {
            out.push((v - m) * s);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Bilinear resize to `target_res` square followed by per-channel
/// normalization, the standard record-to-model-input transform.
pub fn resize_normalize<F: Real>(
    img: &Tensor<F>,
    target_res: usize,
    mean: &[f64],
    std: &[f64],
) -> Result<Tensor<F>> {
    let [_, h, w] = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Shape(format!("resize_normalize expects [C,H,W], got {other:?}")))
        }
    };
    let resized = crop_resize(img, 0, 0, h, w, target_res, target_res)?;
    normalize(&resized, mean, std)
}

pub fn flip_horizontal<F: Real>(img: &Tensor<F>) -> Result<Tensor<F>> {
    let [c, h, w] = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::Shape(format!("flip expects [C,H,W], got {other:?}"))),
    };
    let src = img.data();
    let mut out = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = src[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// 3x3 binomial blur with replicated borders.
pub fn blur3<F: Real>(img: &Tensor<F>) -> Result<Tensor<F>> {
    let [c, h, w] = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::Shape(format!("blur expects [C,H,W], got {other:?}"))),
    };
    let kernel = [1.0, 2.0, 1.0];
    let src = img.data();
    let mut out = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, ky) in (-1i64..=1).zip(kernel) {
                    for (dx, kx) in (-1i64..=1).zip(kernel) {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += ky * kx * src[ch * h * w + sy * w + sx].as_f64();
                    }
                }
                out[ch * h * w + y * w + x] = F::from_f64(acc / 16.0);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("crossfew-data-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_fixture_tree(root: &Path, classes: usize, files: usize) {
        for c in 0..classes {
            let dir = root.join(format!("class{c}"));
            fs::create_dir_all(&dir).unwrap();
            for f in 0..files {
                let t = Tensor::<f32>::from_fn(&[3, 4, 4], |i| {
                    ((i + c * 7 + f * 3) % 10) as f32 / 10.0
                });
                write_raw_tensor(&dir.join(format!("img{f}.ten")), &t).unwrap();
            }
        }
    }

    #[test]
    fn folder_load_counts_and_orders_classes() {
        let root = tmpdir("load");
        write_fixture_tree(&root, 2, 3);
        let ds = load_folder::<f32>(&root).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.n_classes(), 2);
        let ids: Vec<usize> = ds.records().iter().map(|r| r.class_id).collect();
        assert_eq!(ids, vec![0, 0, 0, 1, 1, 1]);
        // Re-load yields identical ordering.
        let ds2 = load_folder::<f32>(&root).unwrap();
        let o1: Vec<&str> = ds.records().iter().map(|r| r.origin.as_str()).collect();
        let o2: Vec<&str> = ds2.records().iter().map(|r| r.origin.as_str()).collect();
        assert_eq!(o1, o2);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn empty_root_is_data_error() {
        let root = tmpdir("empty");
        assert!(matches!(load_folder::<f32>(&root), Err(Error::Data(_))));
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn undecodable_file_reports_path() {
        let root = tmpdir("bad");
        let dir = root.join("classA");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("junk.ten"), b"nope").unwrap();
        let err = load_folder::<f32>(&root).unwrap_err();
        assert!(err.to_string().contains("junk.ten"), "{err}");
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn png_round_trips_through_the_loader() {
        let root = tmpdir("png");
        let dir = root.join("c0");
        fs::create_dir_all(&dir).unwrap();
        let img = image::RgbImage::from_fn(5, 4, |x, y| image::Rgb([(x * 50) as u8, (y * 60) as u8, 7]));
        img.save(dir.join("a.png")).unwrap();
        let ds = load_folder::<f32>(&root).unwrap();
        assert_eq!(ds.record(0).pixels.shape(), &[3, 4, 5]);
        assert!((ds.record(0).pixels.at_flat(0) - 0.0).abs() < 1e-6);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let root = tmpdir("split");
        write_fixture_tree(&root, 3, 10);
        let ds = load_folder::<f32>(&root).unwrap();
        let split = split_target(&ds, 0.2, 7).unwrap();
        assert_eq!(split.unlabeled.len(), 3 * 2);
        assert_eq!(split.evaluation.len(), 3 * 8);
        // Union check: every origin appears exactly once across the pools.
        let mut all: Vec<&str> = split
            .unlabeled
            .records()
            .iter()
            .chain(split.evaluation.records())
            .map(|r| r.origin.as_str())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), ds.len());
        // Same seed, same split.
        let split2 = split_target(&ds, 0.2, 7).unwrap();
        let u1: Vec<&str> = split.unlabeled.records().iter().map(|r| r.origin.as_str()).collect();
        let u2: Vec<&str> = split2.unlabeled.records().iter().map(|r| r.origin.as_str()).collect();
        assert_eq!(u1, u2);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let root = tmpdir("tiny");
        write_fixture_tree(&root, 1, 1);
        let ds = load_folder::<f32>(&root).unwrap();
        assert!(matches!(split_target(&ds, 0.2, 0), Err(Error::Data(_))));
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn synthetic_with_no_jitter_is_centroid_separable() {
        // Oracle: nearest class-centroid in pixel space classifies everything.
        let spec = SyntheticSpec {
            classes: 5,
            per_class_base: 6,
            per_class_target: 12,
            center_jitter: 0.0,
            noise_std: 0.01,
            ..SyntheticSpec::default()
        };
        let (_, target) = synth_generate::<f64>(&spec).unwrap();
        let by_class = target.class_indices();
        let dim = target.record(0).pixels.numel();
        let mut centroids = vec![vec![0.0f64; dim]; spec.classes];
        for (c, idxs) in by_class.iter().enumerate() {
            for &i in &idxs[..6] {
                for (acc, v) in centroids[c].iter_mut().zip(target.record(i).pixels.iter()) {
                    *acc += v / 6.0;
                }
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for (c, idxs) in by_class.iter().enumerate() {
            for &i in &idxs[6..] {
                let px = target.record(i).pixels.to_f64_vec();
                let best = centroids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(&px).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = b.iter().zip(&px).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                total += 1;
                if best == c {
                    correct += 1;
                }
            }
        }
        assert_eq!(correct, total);
    }

    #[test]
    fn identity_transform_makes_domains_identical() {
        let spec = SyntheticSpec {
            classes: 3,
            per_class_base: 4,
            per_class_target: 4,
            transform: DomainTransform::Identity,
            center_jitter: 0.0,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let (base, target) = synth_generate::<f64>(&spec).unwrap();
        for (b, t) in base.records().iter().zip(target.records()) {
            assert!(b.pixels.bit_eq(&t.pixels));
        }
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let spec = SyntheticSpec { classes: 2, per_class_base: 3, ..SyntheticSpec::default() };
        let (a, _) = synth_generate::<f32>(&spec).unwrap();
        let (b, _) = synth_generate::<f32>(&spec).unwrap();
        for (x, y) in a.records().iter().zip(b.records()) {
            assert!(x.pixels.bit_eq(&y.pixels));
        }
    }

    #[test]
    fn resize_to_same_resolution_is_identity() {
        let img = Tensor::<f64>::from_fn(&[3, 6, 6], |i| (i % 13) as f64 / 13.0);
        let out = resize_normalize(&img, 6, &[0.0; 3], &[1.0; 3]).unwrap();
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_stays_constant_under_resize() {
        let img = Tensor::<f64>::full(&[3, 5, 5], 0.7);
        let out = resize_normalize(&img, 3, &[0.0; 3], &[1.0; 3]).unwrap();
        for v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn downscale_matches_hand_bilinear_oracle() {
        // 4 -> 2 with pixel-center alignment samples at source coordinate 0.5
        // and 2.5, i.e. the mean of each 2x2 block.
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let img = Tensor::<f64>::new(vec![1, 4, 4], vals.clone()).unwrap();
        let out = crop_resize(&img, 0, 0, 4, 4, 2, 2).unwrap();
        let block_mean = |ys: [usize; 2], xs: [usize; 2]| {
            (vals[ys[0] * 4 + xs[0]]
                + vals[ys[0] * 4 + xs[1]]
                + vals[ys[1] * 4 + xs[0]]
                + vals[ys[1] * 4 + xs[1]])
                / 4.0
        };
        let expect =
            [block_mean([0, 1], [0, 1]), block_mean([0, 1], [2, 3]), block_mean([2, 3], [0, 1]), block_mean([2, 3], [2, 3])];
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_applies_configured_constants() {
        let img = Tensor::<f64>::full(&[3, 2, 2], 0.5);
        let out = normalize(&img, &[0.5, 0.25, 0.0], &[0.5, 0.5, 2.0]).unwrap();
        assert!((out.at_flat(0) - 0.0).abs() < 1e-12);
        assert!((out.at_flat(4) - 0.5).abs() < 1e-12);
        assert!((out.at_flat(8) - 0.25).abs() < 1e-12);
    }
}
