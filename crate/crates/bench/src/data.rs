//! MNIST-format datasets: IDX parsing, loading, download and import.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, BenchError, Result};

/// Environment variable that overrides the data directory.
pub const DATA_DIR_ENV: &str = "PSP_DATA_DIR";

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Idx {
    /// `count x rows x cols` unsigned bytes.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn format_err(path: &Path, msg: impl Into<String>) -> BenchError {
    BenchError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses an IDX image (`0x00000803`) or label (`0x00000801`) file.
///
/// `path` only labels errors. Nothing is returned unless the whole payload is
/// present.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Idx> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| format_err(path, "truncated header"))
    };
    let magic = word(0)?;
    let (dims, header) = match magic {
        IMAGE_MAGIC => (vec![word(1)?, word(2)?, word(3)?], 16),
        LABEL_MAGIC => (vec![word(1)?], 8),
        m => return Err(format_err(path, format!("bad magic 0x{m:08x}"))),
    };
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| format_err(path, "dimension overflow"))?;
    let payload = &bytes[header..];
    if payload.len() < len {
        return Err(format_err(
            path,
            format!("truncated payload: {} of {len} bytes", payload.len()),
        ));
    }
    if payload.len() > len {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    Ok(match magic {
        IMAGE_MAGIC => Idx::Images {
            count: dims[0] as usize,
            rows: dims[1] as usize,
            cols: dims[2] as usize,
            pixels: payload.to_vec(),
        },
        _ => Idx::Labels(payload.to_vec()),
    })
}

pub fn load_idx(path: &Path) -> Result<Idx> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_idx(&bytes, path)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fashion,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
        }
    }

    fn mirror(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "https://storage.googleapis.com/cvdf-datasets/mnist/",
            DatasetKind::Fashion => "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        }
    }

    /// SHA-256 of the published `.gz` archives, by uncompressed file name.
    fn archive_sha256(self, file: &str) -> &'static str {
        match (self, file) {
            (DatasetKind::Mnist, "train-images-idx3-ubyte") => {
                "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609"
            }
            (DatasetKind::Mnist, "train-labels-idx1-ubyte") => {
                "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c"
            }
            (DatasetKind::Mnist, "t10k-images-idx3-ubyte") => {
                "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6"
            }
            (DatasetKind::Mnist, "t10k-labels-idx1-ubyte") => {
                "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6"
            }
            (DatasetKind::Fashion, "train-images-idx3-ubyte") => {
                "3aede38d61863908ad78613f6a32ed271626dd12800ba2636569512369268a84"
            }
            (DatasetKind::Fashion, "train-labels-idx1-ubyte") => {
                "a04f17134ac03560a47e3764e11b92fc97de4d1bfaf8ba1a3aa29af54cc90845"
            }
            (DatasetKind::Fashion, "t10k-images-idx3-ubyte") => {
                "346e55b948d973a97e58d2351dde16a484bd415d4595297633bb08f03db6a073"
            }
            (DatasetKind::Fashion, "t10k-labels-idx1-ubyte") => {
                "67da17c76eaffca5446c3361aaab5c3cd6d1c2608764d35dfb1850b086bf8dd5"
            }
            _ => unreachable!("unknown file {file}"),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion" | "fashion-mnist" | "fashionmnist" => Ok(DatasetKind::Fashion),
            other => Err(BenchError::Config(format!("unknown dataset {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Grayscale images with labels; pixels kept as bytes, read as `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(split: Split, rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let size = rows * cols;
        if size == 0 || pixels.len() != size * labels.len() {
            return Err(BenchError::Config(format!(
                "{} pixels do not match {} labels of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            split,
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn from_idx(split: Split, images: Idx, labels: Idx) -> Result<Self> {
        match (images, labels) {
            (
                Idx::Images {
                    rows, cols, pixels, ..
                },
                Idx::Labels(labels),
            ) => Self::new(split, rows, cols, pixels, labels),
            _ => Err(BenchError::Config("expected an image file and a label file".into())),
        }
    }

    /// Loads `<dir>/<kind>/{train,t10k}-*-idx?-ubyte`.
    pub fn load(dir: &Path, kind: DatasetKind, split: Split) -> Result<Self> {
        let base = dir.join(kind.name());
        let (img, lab) = split.files();
        Self::from_idx(split, load_idx(&base.join(img))?, load_idx(&base.join(lab))?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let s = self.image_size();
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Pixels of image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.raw_image(i).iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// Indices whose label is in `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.label(i)))
            .collect()
    }
}

/// `--data` flag, else `PSP_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const SUMS_FILE: &str = "SHA256SUMS";

fn read_sums(dir: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(dir.join(SUMS_FILE))
        .map(|s| {
            s.lines()
                .filter_map(|l| l.split_once("  "))
                .map(|(h, f)| (f.trim().to_string(), h.trim().to_string()))
                .collect()
        })
        .unwrap_or_default()
}

fn write_sums(dir: &Path, sums: &BTreeMap<String, String>) -> Result<()> {
    let body: String = sums.iter().map(|(f, h)| format!("{h}  {f}\n")).collect();
    let path = dir.join(SUMS_FILE);
    fs::write(&path, body).map_err(io_err(path))
}

/// What [`fetch`] did with each file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchOutcome {
    /// Present and matching the recorded digest.
    Verified(String),
    Downloaded(String),
}

/// Ensures the four IDX files of `kind` exist under `<dir>/<kind>/`.
///
/// Files already listed in the directory's `SHA256SUMS` are re-hashed and
/// accepted if they match. Missing files are downloaded as `.gz`, checked
/// against the published archive digest, and unpacked.
pub fn fetch(kind: DatasetKind, dir: &Path) -> Result<Vec<FetchOutcome>> {
    let base = dir.join(kind.name());
    fs::create_dir_all(&base).map_err(io_err(&base))?;
    let mut sums = read_sums(&base);
    let mut out = Vec::new();
    for file in IDX_FILES {
        let path = base.join(file);
        if let (Ok(bytes), Some(expected)) = (fs::read(&path), sums.get(file)) {
            let got = sha256_hex(&bytes);
            if &got != expected {
                return Err(BenchError::Checksum {
                    file: path.display().to_string(),
                    expected: expected.clone(),
                    got,
                });
            }
            out.push(FetchOutcome::Verified(file.into()));
            continue;
        }
        let url = format!("{}{file}.gz", kind.mirror());
        let archive = download(&url)?;
        let got = sha256_hex(&archive);
        let expected = kind.archive_sha256(file);
        if got != expected {
            return Err(BenchError::Checksum {
                file: url,
                expected: expected.into(),
                got,
            });
        }
        let mut raw = Vec::new();
        flate2::read::GzDecoder::new(archive.as_slice())
            .read_to_end(&mut raw)
            .map_err(io_err(&path))?;
        parse_idx(&raw, &path)?;
        fs::write(&path, &raw).map_err(io_err(&path))?;
        sums.insert(file.into(), sha256_hex(&raw));
        out.push(FetchOutcome::Downloaded(file.into()));
    }
    write_sums(&base, &sums)?;
    Ok(out)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let mut resp = ureq::get(url)
        .call()
        .map_err(|e| BenchError::Download(format!("{url}: {e}")))?;
    resp.body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_to_vec()
        .map_err(|e| BenchError::Download(format!("{url}: {e}")))
}

/// Copies the four raw IDX files of `kind` from `src` into `<dir>/<kind>/`
/// after checking that each one parses, and records their digests.
pub fn import_idx(kind: DatasetKind, src: &Path, dir: &Path) -> Result<Vec<(Split, usize)>> {
    let base = dir.join(kind.name());
    let mut staged = Vec::new();
    for file in IDX_FILES {
        let path = src.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        parse_idx(&bytes, &path)?;
        staged.push((file, bytes));
    }
    fs::create_dir_all(&base).map_err(io_err(&base))?;
    let mut sums = read_sums(&base);
    for (file, bytes) in &staged {
        let path = base.join(file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        sums.insert(file.to_string(), sha256_hex(bytes));
    }
    write_sums(&base, &sums)?;
    [Split::Train, Split::Test]
        .into_iter()
        .map(|split| Ok((split, Dataset::load(dir, kind, split)?.len())))
        .collect()
}

#[derive(Deserialize)]
struct NpmClass {
    data: serde_json::Value,
}

/// Converts the per-class JSON files of the npm `mnist` / `fashion-mnist`
/// packages into IDX files under `<dir>/<kind>/`.
///
/// `src` is the directory holding `0.json` .. `9.json`. MNIST entries are
/// flat `[0, 1]` floats (784 per image) and are split 85/15 per class into
/// train/test; Fashion entries are arrays of 784 bytes, and the first 6000 of
/// each class go to train, the rest to test. Images are interleaved by class
/// in round-robin order so that any prefix of a split is class balanced.
pub fn import_npm(kind: DatasetKind, src: &Path, dir: &Path) -> Result<Vec<(Split, usize)>> {
    let mut per_class: Vec<Vec<Vec<u8>>> = Vec::with_capacity(10);
    for class in 0..10 {
        let path = src.join(format!("{class}.json"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let parsed: NpmClass =
            serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
        let images = match (kind, parsed.data) {
            (DatasetKind::Mnist, serde_json::Value::Array(flat)) => {
                let vals: Vec<f64> = flat
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| format_err(&path, "non-numeric pixel")))
                    .collect::<Result<_>>()?;
                if !vals.len().is_multiple_of(784) {
                    return Err(format_err(&path, "pixel count not a multiple of 784"));
                }
                vals.chunks(784)
                    .map(|c| c.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect())
                    .collect()
            }
            // The package carries a few empty entries; they are skipped.
            (DatasetKind::Fashion, serde_json::Value::Array(rows)) => rows
                .iter()
                .filter(|r| r.as_array().is_none_or(|a| !a.is_empty()))
                .map(|r| {
                    let px: Vec<u8> = r
                        .as_array()
                        .ok_or_else(|| format_err(&path, "image is not an array"))?
                        .iter()
                        .map(|v| v.as_u64().filter(|&p| p < 256).map(|p| p as u8))
                        .collect::<Option<_>>()
                        .ok_or_else(|| format_err(&path, "pixel out of range"))?;
                    if px.len() != 784 {
                        return Err(format_err(&path, "image is not 784 pixels"));
                    }
                    Ok(px)
                })
                .collect::<Result<_>>()?,
            _ => return Err(format_err(&path, "unexpected layout")),
        };
        per_class.push(images);
    }
    let base = dir.join(kind.name());
    fs::create_dir_all(&base).map_err(io_err(&base))?;
    let mut sums = read_sums(&base);
    let mut counts = Vec::new();
    for split in [Split::Train, Split::Test] {
        let parts: Vec<&[Vec<u8>]> = per_class
            .iter()
            .map(|imgs| {
                let cut = match kind {
                    DatasetKind::Mnist => (imgs.len() * 85 + 50) / 100,
                    DatasetKind::Fashion => imgs.len().min(6000),
                };
                match split {
                    Split::Train => &imgs[..cut],
                    Split::Test => &imgs[cut..],
                }
            })
            .collect();
        let longest = parts.iter().map(|p| p.len()).max().unwrap_or(0);
        let (mut pixels, mut labels) = (Vec::new(), Vec::new());
        for i in 0..longest {
            for (class, part) in parts.iter().enumerate() {
                if let Some(img) = part.get(i) {
                    pixels.extend_from_slice(img);
                    labels.push(class as u8);
                }
            }
        }
        let (img_name, lab_name) = split.files();
        for (name, bytes) in [
            (img_name, encode_idx_images(28, 28, &pixels)),
            (lab_name, encode_idx_labels(&labels)),
        ] {
            let path = base.join(name);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            sums.insert(name.into(), sha256_hex(&bytes));
        }
        counts.push((split, labels.len()));
    }
    write_sums(&base, &sums)?;
    Ok(counts)
}
