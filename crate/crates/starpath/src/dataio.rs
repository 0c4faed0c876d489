//! Dataset ingestion (IDX files) and synthetic dataset generation.

use crate::rng::{mix64, Stream};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic 0x{found:08x} at byte {offset} of {path} (expected 0x{expected:08x})")]
    BadMagic {
        path: String,
        offset: u64,
        found: u32,
        expected: u32,
    },
    #[error("truncated file {path}: needed {needed} bytes at byte {offset}")]
    Truncated {
        path: String,
        offset: u64,
        needed: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("subset count {count} exceeds dataset size {n}")]
    SubsetTooLarge { count: usize, n: usize },
    #[error("balanced subset count {count} not divisible by {classes} classes")]
    UnbalancedCount { count: usize, classes: usize },
    #[error("balanced subset needs {per_class} samples of class {class}, dataset has {available}")]
    ClassExhausted {
        class: usize,
        per_class: usize,
        available: usize,
    },
}

/// An immutable labeled dataset. Inputs are reals in `[0, 1]`, stored
/// row-major (`n` rows of `d_in` features).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub n: usize,
    pub d_in: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    pub checksum: u64,
}

impl Dataset {
    /// Assembles a dataset and computes its content checksum.
    pub fn new(inputs: Vec<f64>, d_in: usize, labels: Vec<usize>, name: impl Into<String>) -> Self {
        let n = labels.len();
        assert_eq!(inputs.len(), n * d_in, "Dataset: inputs/labels shape mismatch");
        assert!(n >= 1, "Dataset: empty");
        assert!(inputs.iter().all(|v| v.is_finite()), "Dataset: non-finite input");
        let num_classes = labels.iter().max().map_or(1, |m| m + 1);
        let checksum = content_hash(&inputs, &labels);
        Dataset {
            inputs,
            n,
            d_in,
            labels,
            num_classes,
            name: name.into(),
            checksum,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d_in..(i + 1) * self.d_in]
    }
}

fn content_hash(inputs: &[f64], labels: &[usize]) -> u64 {
    let mut h = 0x6461_7461u64; // "data"
    for v in inputs {
        h = mix64(h ^ v.to_bits());
    }
    for &l in labels {
        h = mix64(h ^ (l as u64).wrapping_add(0x9e37_79b9));
    }
    h
}

struct Cursor<R> {
    reader: R,
    path: String,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), DataError> {
        match self.reader.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(DataError::Truncated {
                path: self.path.clone(),
                offset: self.offset,
                needed: buf.len(),
            }),
            Err(e) => Err(DataError::Io {
                path: self.path.clone(),
                source: e,
            }),
        }
    }

    fn read_u32_be(&mut self) -> Result<u32, DataError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}

fn open_cursor(path: &Path) -> Result<Cursor<BufReader<File>>, DataError> {
    let file = File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(Cursor {
        reader: BufReader::new(file),
        path: path.display().to_string(),
        offset: 0,
    })
}

/// Loads an IDX image/label file pair (the MNIST container format;
/// big-endian, magic 0x00000803 for images and 0x00000801 for labels).
/// Pixel bytes are scaled by 1/255 into `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut img = open_cursor(images_path)?;
    let magic_offset = img.offset;
    let magic = img.read_u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: img.path,
            offset: magic_offset,
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n_images = img.read_u32_be()? as usize;
    let rows = img.read_u32_be()? as usize;
    let cols = img.read_u32_be()? as usize;
    let d_in = rows * cols;
    let mut pixels = vec![0u8; n_images * d_in];
    img.read_exact(&mut pixels)?;

    let mut lab = open_cursor(labels_path)?;
    let magic_offset = lab.offset;
    let magic = lab.read_u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: lab.path,
            offset: magic_offset,
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = lab.read_u32_be()? as usize;
    if n_labels != n_images {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let mut label_bytes = vec![0u8; n_labels];
    lab.read_exact(&mut label_bytes)?;

    let inputs: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(Dataset::new(inputs, d_in, labels, name))
}

/// Writes a dataset as an IDX image/label file pair. Inputs are quantized
/// back to bytes (`round(v * 255)`), so only datasets that originated from
/// byte pixels round-trip exactly.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path, e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut img = BufWriter::new(File::create(images_path).map_err(|e| io_err(images_path, e))?);
    let write = |w: &mut BufWriter<File>, bytes: &[u8], path: &Path| {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };
    write(&mut img, &IDX_IMAGES_MAGIC.to_be_bytes(), images_path)?;
    write(&mut img, &(ds.n as u32).to_be_bytes(), images_path)?;
    // store as a single pixel row per image
    write(&mut img, &1u32.to_be_bytes(), images_path)?;
    write(&mut img, &(ds.d_in as u32).to_be_bytes(), images_path)?;
    let pixels: Vec<u8> = ds
        .inputs
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write(&mut img, &pixels, images_path)?;
    img.flush().map_err(|e| io_err(images_path, e))?;

    let mut lab = BufWriter::new(File::create(labels_path).map_err(|e| io_err(labels_path, e))?);
    write(&mut lab, &IDX_LABELS_MAGIC.to_be_bytes(), labels_path)?;
    write(&mut lab, &(ds.n as u32).to_be_bytes(), labels_path)?;
    let label_bytes: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    write(&mut lab, &label_bytes, labels_path)?;
    lab.flush().map_err(|e| io_err(labels_path, e))?;
    Ok(())
}

/// Seeded sample of `count` rows without replacement. In balanced mode the
/// sample takes exactly `count / num_classes` rows per class.
pub fn subset(ds: &Dataset, count: usize, seed: u64, balanced: bool) -> Result<Dataset, DataError> {
    if count > ds.n {
        return Err(DataError::SubsetTooLarge { count, n: ds.n });
    }
    let mut stream = Stream::keyed(&[seed, 0x737562]); // "sub" tag
    let chosen: Vec<usize> = if balanced {
        let c = ds.num_classes;
        if !count.is_multiple_of(c) {
            return Err(DataError::UnbalancedCount { count, classes: c });
        }
        let per_class = count / c;
        let mut chosen = Vec::with_capacity(count);
        for class in 0..c {
            let mut pool: Vec<usize> = (0..ds.n).filter(|&i| ds.labels[i] == class).collect();
            if pool.len() < per_class {
                return Err(DataError::ClassExhausted {
                    class,
                    per_class,
                    available: pool.len(),
                });
            }
            // partial Fisher-Yates: first per_class entries
            for i in 0..per_class {
                let j = i + stream.below((pool.len() - i) as u64) as usize;
                pool.swap(i, j);
            }
            chosen.extend_from_slice(&pool[..per_class]);
        }
        chosen
    } else {
        let mut pool: Vec<usize> = (0..ds.n).collect();
        for i in 0..count {
            let j = i + stream.below((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    };
    let mut inputs = Vec::with_capacity(count * ds.d_in);
    let mut labels = Vec::with_capacity(count);
    for &i in &chosen {
        inputs.extend_from_slice(ds.row(i));
        labels.push(ds.labels[i]);
    }
    Ok(Dataset::new(
        inputs,
        ds.d_in,
        labels,
        format!("{}[subset{}]", ds.name, count),
    ))
}

/// Gaussian clusters, one per class, with means drawn uniformly in
/// `[-separation/2, separation/2]` per coordinate and unit within-cluster
/// noise. The whole matrix is min-max rescaled into `[0, 1]` afterwards
/// (affine, so separability is preserved).
pub fn make_blobs(
    n_per_class: usize,
    classes: usize,
    d_in: usize,
    separation: f64,
    seed: u64,
) -> Dataset {
    assert!(n_per_class >= 1 && classes >= 1 && d_in >= 1, "make_blobs: zero-sized argument");
    assert!(separation > 0.0, "make_blobs: separation must be positive");
    let mut stream = Stream::keyed(&[seed, 0x626c6f62]); // "blob" tag
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d_in)
                .map(|_| stream.next_range(-separation / 2.0, separation / 2.0))
                .collect()
        })
        .collect();
    let n = n_per_class * classes;
    let mut inputs = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            inputs.extend(mean.iter().map(|&m| m + stream.next_normal()));
            labels.push(class);
        }
    }
    let lo = inputs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = inputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut inputs {
        *v = (*v - lo) / span;
    }
    Dataset::new(inputs, d_in, labels, format!("blobs{classes}x{n_per_class}"))
}
