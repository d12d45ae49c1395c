//! Image quality metrics and the bucketed evaluation harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{center_square_crop, rgb_to_tensor, ImageDataset};
use crate::error::{Error, Result};
use crate::mask::{hole_ratio, load_mask_file, ratio_bucket, Mask, MaskSpec, RatioBucket};
use crate::pyramid::apply_mask;
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::dim(format!("{what}: empty images")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_metric<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b, "l1")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(1 / MSE)` for data range 1, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| win[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, win);
    let mu_b = filter_valid(b, h, w, win);
    let e_aa = filter_valid(&aa, h, w, win);
    let e_bb = filter_valid(&bb, h, w, win);
    let e_ab = filter_valid(&ab, h, w, win);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over valid 11×11 Gaussian windows, per channel then averaged
/// over channels and images. Inputs are `[N, C, H, W]` in `[0, 1]`.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let plane = h * w;
    let to_f64 = |s: &[T]| s.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let mut total = 0.0;
    for p in 0..n * c {
        let pa = to_f64(&a.data()[p * plane..(p + 1) * plane]);
        let pb = to_f64(&b.data()[p * plane..(p + 1) * plane]);
        total += ssim_plane(&pa, &pb, h, w, &win);
    }
    Ok(total / (n * c) as f64)
}

/// Fills holes of a masked input; returns the composited full image.
pub trait Inpainter {
    fn model_id(&self) -> String;

    /// Image sides must be multiples of this value.
    fn size_multiple(&self) -> usize {
        1
    }

    /// `z` is `[1, 3, H, W]` with holes set to white, `m` is `[1, 1, H, W]`.
    fn inpaint(&self, z: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Where evaluation masks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskSource {
    /// The fixed centered hole, reported as its own row.
    Center,
    /// Free-form masks seeded with `seed + image index`.
    Freeform { seed: u64 },
    /// Mask files from a directory in path order, reused cyclically.
    Directory { path: PathBuf },
}

impl MaskSource {
    pub fn describe(&self) -> String {
        match self {
            MaskSource::Center => "center".into(),
            MaskSource::Freeform { seed } => format!("freeform(seed={seed})"),
            MaskSource::Directory { path } => format!("dir({})", path.display()),
        }
    }
}

struct MaskProvider {
    source: MaskSource,
    files: Vec<PathBuf>,
}

impl MaskProvider {
    fn new(source: &MaskSource) -> Result<Self> {
        let files = match source {
            MaskSource::Directory { path } => {
                let set = ImageDataset::open(path)?;
                if set.is_empty() {
                    return Err(Error::input(format!("no mask files under {}", path.display())));
                }
                set.paths().to_vec()
            }
            _ => Vec::new(),
        };
        Ok(MaskProvider {
            source: source.clone(),
            files,
        })
    }

    fn mask(&self, index: usize, size: usize) -> Result<Mask> {
        match &self.source {
            MaskSource::Center => MaskSpec::center().generate(size, size),
            MaskSource::Freeform { seed } => {
                MaskSpec::freeform(seed.wrapping_add(index as u64)).generate(size, size)
            }
            MaskSource::Directory { .. } => {
                let m = load_mask_file(&self.files[index % self.files.len()])?;
                Ok(m.resize_nearest(size, size))
            }
        }
    }
}

/// Metrics of one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub row: String,
    pub hole_ratio: f64,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Aggregated metrics of one mask-ratio bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub mask: String,
    pub count: usize,
    pub l1: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub resolution: usize,
    pub mask_source: String,
    pub rows: Vec<BucketRow>,
    pub images: Vec<ImageRecord>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn row(&self, mask: &str) -> Option<&BucketRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }

    fn from_records(
        model_id: String,
        resolution: usize,
        source: &MaskSource,
        images: Vec<ImageRecord>,
    ) -> Self {
        let labels: Vec<String> = match source {
            MaskSource::Center => vec!["center".into()],
            _ => RatioBucket::IN_RANGE
                .iter()
                .chain([RatioBucket::OutOfRange].iter())
                .map(|b| b.label().to_string())
                .collect(),
        };
        let rows = labels
            .into_iter()
            .map(|label| {
                let members: Vec<&ImageRecord> = images.iter().filter(|r| r.row == label).collect();
                let mean = |f: fn(&ImageRecord) -> f64| {
                    (!members.is_empty())
                        .then(|| members.iter().map(|r| f(r)).sum::<f64>() / members.len() as f64)
                };
                BucketRow {
                    count: members.len(),
                    l1: mean(|r| r.l1),
                    psnr: mean(|r| r.psnr),
                    ssim: mean(|r| r.ssim),
                    mask: label,
                }
            })
            .collect();
        EvalReport {
            model_id,
            resolution,
            mask_source: source.describe(),
            rows,
            images,
        }
    }
}

/// Runs `model` over every image of `dataset` at `resolution × resolution`.
pub fn evaluate(
    dataset: &ImageDataset,
    masks: &MaskSource,
    model: &dyn Inpainter,
    resolution: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::input(format!(
            "dataset {} contains no images",
            dataset.root().display()
        )));
    }
    let multiple = model.size_multiple().max(1);
    if resolution == 0 || resolution % multiple != 0 {
        return Err(Error::dim(format!(
            "resolution {resolution} is not a multiple of {multiple}"
        )));
    }
    let provider = MaskProvider::new(masks)?;
    let mut records = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let img = center_square_crop(&dataset.load(i)?, resolution as u32);
        let x: Tensor<f32> = rgb_to_tensor(&img);
        let mask = provider.mask(i, resolution)?;
        let m: Tensor<f32> = mask.to_tensor();
        let z = apply_mask(&x, &m)?;
        let y = model.inpaint(&z, &m)?;
        let ratio = hole_ratio(&mask);
        let row = match masks {
            MaskSource::Center => "center".to_string(),
            _ => ratio_bucket(ratio).label().to_string(),
        };
        let record = ImageRecord {
            path: dataset.paths()[i].clone(),
            row,
            hole_ratio: ratio,
            l1: l1_metric(&y, &x)?,
            psnr: psnr(&y, &x)?,
            ssim: ssim(&y, &x)?,
        };
        for v in [record.l1, record.psnr, record.ssim] {
            if !v.is_finite() {
                return Err(Error::input(format!(
                    "non-finite metric for {}",
                    record.path.display()
                )));
            }
        }
        records.push(record);
    }
    Ok(EvalReport::from_records(model.model_id(), resolution, masks, records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::input(format!("unknown table format {other:?}"))),
        }
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

/// Serializes the per-bucket rows; columns are Mask, Method, L1, PSNR, SSIM, Count.
pub fn emit_table(report: &EvalReport, format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Json => serde_json::to_string_pretty(report)
            .map_err(|e| Error::input(format!("cannot serialize report: {e}"))),
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let err = |e: csv::Error| Error::input(format!("cannot write csv: {e}"));
            w.write_record(["Mask", "Method", "L1", "PSNR", "SSIM", "Count"])
                .map_err(err)?;
            for r in &report.rows {
                w.write_record([
                    r.mask.clone(),
                    report.model_id.clone(),
                    fmt_opt(r.l1, 6),
                    fmt_opt(r.psnr, 4),
                    fmt_opt(r.ssim, 6),
                    r.count.to_string(),
                ])
                .map_err(err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::input(format!("cannot write csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        TableFormat::Text => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "# model={} resolution={} masks={}",
                report.model_id, report.resolution, report.mask_source
            );
            let _ = writeln!(
                s,
                "{:<8} {:<20} {:>10} {:>10} {:>10} {:>6}",
                "Mask", "Method", "L1", "PSNR", "SSIM", "Count"
            );
            for r in &report.rows {
                let _ = writeln!(
                    s,
                    "{:<8} {:<20} {:>10} {:>10} {:>10} {:>6}",
                    r.mask,
                    report.model_id,
                    fmt_opt(r.l1, 4),
                    fmt_opt(r.psnr, 2),
                    fmt_opt(r.ssim, 4),
                    r.count
                );
            }
            Ok(s)
        }
    }
}

/// Writes the text, csv and json tables next to each other under `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (fmt, name) in [
        (TableFormat::Text, "report.txt"),
        (TableFormat::Csv, "report.csv"),
        (TableFormat::Json, "report.json"),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, emit_table(report, fmt)?).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
