//! Dataset ingestion, partitioning, and synthetic generation.
//!
//! Data matrices are column-major samples: a `dim × count` matrix holds
//! `count` samples of dimension `dim`. All randomness is drawn from seeds
//! derived with [`engine::derive_seed`], so partitions, synthetic draws, and
//! subset selections are reproducible from the master seed alone.

use std::fs::File;
use std::io::{BufReader, Read as IoRead};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::{derive_seed, STREAM_DATA, STREAM_PARTITION, STREAM_SUBSET};
use crate::error::{Error, Result};

/// Magic number opening an IDX image file.
pub const IDX_IMAGE_MAGIC: u32 = 2051;
/// Magic number opening an IDX label file.
pub const IDX_LABEL_MAGIC: u32 = 2049;

/// Standard file names of the MNIST training set.
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
/// Label-file companion of [`MNIST_TRAIN_IMAGES`].
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_u32(reader: &mut impl IoRead, path: &Path, what: &str) -> Result<u32> {
    reader.read_u32::<BigEndian>().map_err(|_| {
        Error::Dataset(format!("{}: truncated while reading {what}", path.display()))
    })
}

/// Reads an uncompressed IDX image file into a `pixels × images` matrix with
/// pixel values scaled to `[0, 1]`.
///
/// The file must start with the big-endian magic number
/// [`IDX_IMAGE_MAGIC`], followed by the image count, row count, and column
/// count; each image is stored as `rows · cols` unsigned bytes.
pub fn load_idx_images(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = open(path)?;
    let magic = read_u32(&mut reader, path, "the magic number")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: expected image magic {IDX_IMAGE_MAGIC}, found {magic}",
            path.display()
        )));
    }
    let count = read_u32(&mut reader, path, "the image count")? as usize;
    let rows = read_u32(&mut reader, path, "the row count")? as usize;
    let cols = read_u32(&mut reader, path, "the column count")? as usize;
    let pixels = rows * cols;
    let mut raw = vec![0u8; count * pixels];
    reader.read_exact(&mut raw).map_err(|_| {
        Error::Dataset(format!(
            "{}: truncated: expected {count} images of {pixels} bytes",
            path.display()
        ))
    })?;
    // One image per column, pixels in file order.
    Ok(DMatrix::from_fn(pixels, count, |p, i| {
        f64::from(raw[i * pixels + p]) / 255.0
    }))
}

/// Reads an uncompressed IDX label file.
///
/// The file must start with the big-endian magic number
/// [`IDX_LABEL_MAGIC`] followed by the label count and one byte per label.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut reader = open(path)?;
    let magic = read_u32(&mut reader, path, "the magic number")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: expected label magic {IDX_LABEL_MAGIC}, found {magic}",
            path.display()
        )));
    }
    let count = read_u32(&mut reader, path, "the label count")? as usize;
    let mut labels = vec![0u8; count];
    reader.read_exact(&mut labels).map_err(|_| {
        Error::Dataset(format!(
            "{}: truncated: expected {count} labels",
            path.display()
        ))
    })?;
    Ok(labels)
}

/// Loads the MNIST training images restricted to a digit set.
///
/// `dir` must contain [`MNIST_TRAIN_IMAGES`] and [`MNIST_TRAIN_LABELS`].
/// Returns a `784 × n` matrix of the retained images (file order preserved)
/// and their labels.
pub fn load_mnist(dir: &Path, digits: &[u8]) -> Result<(DMatrix<f64>, Vec<u8>)> {
    if digits.is_empty() {
        return Err(Error::Dataset("the digit filter is empty".into()));
    }
    if let Some(bad) = digits.iter().find(|&&d| d > 9) {
        return Err(Error::Dataset(format!("{bad} is not a decimal digit")));
    }
    let images = load_idx_images(&dir.join(MNIST_TRAIN_IMAGES))?;
    let labels = load_idx_labels(&dir.join(MNIST_TRAIN_LABELS))?;
    if images.ncols() != labels.len() {
        return Err(Error::Dataset(format!(
            "{}: {} images but {} labels",
            dir.display(),
            images.ncols(),
            labels.len()
        )));
    }
    let keep: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| digits.contains(l))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples remain after filtering to digits {digits:?}"
        )));
    }
    let filtered = images.select_columns(&keep);
    let kept_labels = keep.iter().map(|&i| labels[i]).collect();
    Ok((filtered, kept_labels))
}

/// Splits `data` into `j` disjoint blocks of `per_node` columns each.
///
/// Columns are shuffled with a deterministic permutation derived from
/// `seed`, then sliced contiguously; the same seed always yields the same
/// partition.
pub fn partition(
    data: &DMatrix<f64>,
    j: usize,
    per_node: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    if j == 0 || per_node == 0 {
        return Err(Error::Dataset(format!(
            "partition needs at least one node and one sample per node, got {j} × {per_node}"
        )));
    }
    let needed = j * per_node;
    if data.ncols() < needed {
        return Err(Error::Dataset(format!(
            "partition needs {needed} samples ({j} nodes × {per_node}), only {} available",
            data.ncols()
        )));
    }
    let mut order: Vec<usize> = (0..data.ncols()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PARTITION, 0, 0));
    order.shuffle(&mut rng);
    Ok((0..j)
        .map(|b| data.select_columns(&order[b * per_node..(b + 1) * per_node]))
        .collect())
}

/// Draws `count` Gaussian samples of dimension `dims`.
///
/// Axis `r` has standard deviation `1 / (1 + r)`: the decaying scales give
/// the cloud a unique principal direction, so spectral ground truth is
/// well-separated. Deterministic in `seed`.
pub fn gaussian_blob(dims: usize, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    if dims == 0 || count == 0 {
        return Err(Error::Dataset(format!(
            "synthetic data needs positive dimensions and count, got {dims} × {count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DATA, 0, 0));
    // Column-major draw order so the stream is stable under reshaping.
    Ok(DMatrix::from_fn(dims, count, |r, _| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x / (1.0 + r as f64)
    }))
}

/// Reads a numeric CSV into a `dim × count` matrix (one sample per line).
///
/// If the first line fails to parse as numbers it is treated as a header and
/// skipped. Every remaining line must hold the same number of comma-separated
/// finite values.
pub fn load_csv_columns(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_line = |line: &str| -> Option<Vec<f64>> {
        line.split(',')
            .map(|tok| tok.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect()
    };
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Some(values) => {
                if let Some(first) = samples.first() {
                    if values.len() != first.len() {
                        return Err(Error::Dataset(format!(
                            "{}:{}: expected {} values per line, found {}",
                            path.display(),
                            lineno + 1,
                            first.len(),
                            values.len()
                        )));
                    }
                }
                samples.push(values);
            }
            None if samples.is_empty() && lineno == 0 => continue, // header
            None => {
                return Err(Error::Dataset(format!(
                    "{}:{}: non-numeric value in {line:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no numeric rows found",
            path.display()
        )));
    }
    let dim = samples[0].len();
    if dim == 0 {
        return Err(Error::Dataset(format!(
            "{}: rows carry no values",
            path.display()
        )));
    }
    Ok(DMatrix::from_fn(dim, samples.len(), |r, c| samples[c][r]))
}

/// Maximum subset size used by [`median_heuristic_gamma`].
pub const BANDWIDTH_SUBSET: usize = 500;

/// Radial-basis bandwidth from the median pairwise distance.
///
/// Takes a deterministic subset of at most [`BANDWIDTH_SUBSET`] samples
/// (seeded shuffle), computes all pairwise Euclidean distances, and returns
/// `γ = 1 / (2 · median²)`. Errors if the median distance is zero (all
/// subset samples identical).
pub fn median_heuristic_gamma(data: &DMatrix<f64>, seed: u64) -> Result<f64> {
    if data.ncols() < 2 {
        return Err(Error::Dataset(format!(
            "the bandwidth heuristic needs at least 2 samples, got {}",
            data.ncols()
        )));
    }
    let mut order: Vec<usize> = (0..data.ncols()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SUBSET, 0, 0));
    order.shuffle(&mut rng);
    order.truncate(BANDWIDTH_SUBSET);
    let mut distances = Vec::with_capacity(order.len() * (order.len() - 1) / 2);
    for (i, &a) in order.iter().enumerate() {
        for &b in &order[i + 1..] {
            distances.push((data.column(a) - data.column(b)).norm());
        }
    }
    distances.sort_by(|x, y| x.total_cmp(y));
    let median = if distances.len() % 2 == 1 {
        distances[distances.len() / 2]
    } else {
        0.5 * (distances[distances.len() / 2 - 1] + distances[distances.len() / 2])
    };
    if median <= 0.0 {
        return Err(Error::Dataset(
            "median pairwise distance is zero; cannot infer a bandwidth".into(),
        ));
    }
    Ok(1.0 / (2.0 * median * median))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use byteorder::{BigEndian, WriteBytesExt};
    use std::io::Write;

    fn write_idx_images(path: &Path, rows: u32, cols: u32, images: &[&[u8]]) {
        let mut f = File::create(path).unwrap();
        f.write_u32::<BigEndian>(IDX_IMAGE_MAGIC).unwrap();
        f.write_u32::<BigEndian>(images.len() as u32).unwrap();
        f.write_u32::<BigEndian>(rows).unwrap();
        f.write_u32::<BigEndian>(cols).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_u32::<BigEndian>(IDX_LABEL_MAGIC).unwrap();
        f.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn idx_images_scale_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_images(&path, 2, 2, &[&[0, 51, 102, 255], &[255, 0, 0, 0]]);
        let m = load_idx_images(&path).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (4, 2));
        assert_relative_eq!(m[(0, 0)], 0.0);
        assert_relative_eq!(m[(1, 0)], 0.2);
        assert_relative_eq!(m[(3, 0)], 1.0);
        assert_relative_eq!(m[(0, 1)], 1.0);
    }

    #[test]
    fn wrong_image_magic_names_the_expected_constant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        let mut f = File::create(&path).unwrap();
        f.write_u32::<BigEndian>(1234).unwrap();
        f.write_u32::<BigEndian>(0).unwrap();
        f.write_u32::<BigEndian>(1).unwrap();
        f.write_u32::<BigEndian>(1).unwrap();
        let err = load_idx_images(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2051") && msg.contains("1234"), "{msg}");
    }

    #[test]
    fn truncated_image_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short");
        let mut f = File::create(&path).unwrap();
        f.write_u32::<BigEndian>(IDX_IMAGE_MAGIC).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        f.write_all(&[1, 2, 3]).unwrap(); // needs 8 bytes
        let err = load_idx_images(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn mnist_filter_keeps_only_requested_digits() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(
            &dir.path().join(MNIST_TRAIN_IMAGES),
            1,
            2,
            &[&[10, 20], &[30, 40], &[50, 60], &[70, 80]],
        );
        write_idx_labels(&dir.path().join(MNIST_TRAIN_LABELS), &[3, 7, 3, 5]);
        let (data, labels) = load_mnist(dir.path(), &[3, 5]).unwrap();
        assert_eq!((data.nrows(), data.ncols()), (2, 3));
        assert_eq!(labels, vec![3, 3, 5]);
        assert_relative_eq!(data[(0, 0)], 10.0 / 255.0);
        assert_relative_eq!(data[(0, 1)], 50.0 / 255.0);
        assert_relative_eq!(data[(1, 2)], 80.0 / 255.0);
    }

    #[test]
    fn empty_digit_filter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_mnist(dir.path(), &[]),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn absent_digits_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(&dir.path().join(MNIST_TRAIN_IMAGES), 1, 1, &[&[1], &[2]]);
        write_idx_labels(&dir.path().join(MNIST_TRAIN_LABELS), &[4, 4]);
        let err = load_mnist(dir.path(), &[9]).unwrap_err();
        assert!(err.to_string().contains("no samples"), "{err}");
    }

    #[test]
    fn label_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(&dir.path().join(MNIST_TRAIN_IMAGES), 1, 1, &[&[1], &[2]]);
        write_idx_labels(&dir.path().join(MNIST_TRAIN_LABELS), &[4]);
        let err = load_mnist(dir.path(), &[4]).unwrap_err();
        assert!(err.to_string().contains("2 images but 1 labels"), "{err}");
    }

    #[test]
    fn partition_blocks_are_disjoint_and_deterministic() {
        // Columns are distinguishable singletons, so block membership can be
        // recovered exactly.
        let data = DMatrix::from_fn(1, 10, |_, c| c as f64);
        let a = partition(&data, 3, 3, 42).unwrap();
        let b = partition(&data, 3, 3, 42).unwrap();
        assert_eq!(a.len(), 3);
        let mut seen: Vec<i64> = a
            .iter()
            .flat_map(|block| block.iter().map(|&v| v as i64))
            .collect();
        assert_eq!(a.iter().map(DMatrix::ncols).sum::<usize>(), 9);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9, "blocks overlap");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        let c = partition(&data, 3, 3, 43).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x != y), "seed ignored");
    }

    #[test]
    fn partition_rejects_overcommitment() {
        let data = DMatrix::from_element(2, 5, 1.0);
        let err = partition(&data, 2, 3, 0).unwrap_err();
        assert!(err.to_string().contains("needs 6 samples"), "{err}");
    }

    #[test]
    fn gaussian_blob_is_seeded_and_anisotropic() {
        let a = gaussian_blob(3, 400, 9).unwrap();
        let b = gaussian_blob(3, 400, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gaussian_blob(3, 400, 10).unwrap());
        let var = |r: usize| a.row(r).iter().map(|v| v * v).sum::<f64>() / 400.0;
        // Axis scales 1, 1/2, 1/3 ⇒ variances ≈ 1, 0.25, 0.11.
        assert!(var(0) > 2.0 * var(1) && var(1) > 2.0 * var(2));
    }

    #[test]
    fn csv_samples_become_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x,y\n1.0, 2.0\n3.0, 4.0\n\n5.0, 6.0\n").unwrap();
        let m = load_csv_columns(&path).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (2, 3));
        assert_relative_eq!(m[(0, 0)], 1.0);
        assert_relative_eq!(m[(1, 2)], 6.0);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        let err = load_csv_columns(&path).unwrap_err();
        assert!(err.to_string().contains("expected 2 values"), "{err}");
    }

    #[test]
    fn non_numeric_csv_body_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1.0,2.0\n3.0,oops\n").unwrap();
        assert!(matches!(
            load_csv_columns(&path),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn median_bandwidth_matches_hand_computation() {
        // Points 0, 1, 3 on the line: distances {1, 2, 3}, median 2,
        // γ = 1/(2·4) = 0.125.
        let data = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 3.0]);
        assert_relative_eq!(
            median_heuristic_gamma(&data, 7).unwrap(),
            0.125,
            epsilon = 1e-15
        );
        // Two points: single distance 1, γ = 0.5.
        let pair = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_relative_eq!(
            median_heuristic_gamma(&pair, 7).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn identical_samples_yield_no_bandwidth() {
        let data = DMatrix::from_element(2, 4, 3.0);
        assert!(matches!(
            median_heuristic_gamma(&data, 0),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn bandwidth_subset_is_deterministic() {
        let data = gaussian_blob(4, 600, 3).unwrap();
        let a = median_heuristic_gamma(&data, 11).unwrap();
        let b = median_heuristic_gamma(&data, 11).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }
}
