//! Training pairs, the `PDS1` dataset file and batch sampling.
//!
//! A dataset is a flat array of records, each record being the input state
//! followed by the target state one step later, both as `N × 2D` rows of
//! `[p v]`. The file layout (all little-endian):
//!
//! ```text
//! "PDS1" | version u32 | N u32 | D u32 | pair_count u64 | seed_count u32 | seeds u64*
//! records: pair_count × (x: N·2D f32, y: N·2D f32)
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seeds;
use crate::sim::{simulate_trajectory, ParticleState, SimConfig, SimError};

pub const DATASET_MAGIC: &[u8; 4] = b"PDS1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("trajectory has {0} states; at least 2 are needed to form a pair")]
    ShortTrajectory(usize),
    #[error("dataset exhausted: {requested} pairs requested at cursor {cursor} of {available}; generate more data")]
    Exhausted {
        cursor: u64,
        requested: usize,
        available: u64,
    },
    #[error("dataset format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("dataset truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("pairs have inconsistent shapes")]
    Shape,
    #[error("invalid cursor {0:?}")]
    Cursor(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An input state and the state one time step later.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePair {
    pub x: ParticleState,
    pub y: ParticleState,
}

pub fn trajectory_to_pairs(traj: &[ParticleState]) -> Result<Vec<StatePair>, DataError> {
    if traj.len() < 2 {
        return Err(DataError::ShortTrajectory(traj.len()));
    }
    Ok(traj
        .windows(2)
        .map(|w| StatePair {
            x: w[0].clone(),
            y: w[1].clone(),
        })
        .collect())
}

/// Concatenate the streams and apply a uniform random permutation.
pub fn shuffle_merge(streams: Vec<Vec<StatePair>>, seed: u64) -> Vec<StatePair> {
    let mut all: Vec<StatePair> = streams.into_iter().flatten().collect();
    all.shuffle(&mut seeds::substream(seed, "train-shuffle"));
    all
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub particle_count: u32,
    pub spatial_dim: u32,
    pub pair_count: u64,
    pub seeds: Vec<u64>,
}

impl DatasetHeader {
    fn byte_len(&self) -> u64 {
        4 + 4 + 4 + 4 + 8 + 4 + 8 * self.seeds.len() as u64
    }
}

/// Pairs stored as flat records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub particle_count: usize,
    pub spatial_dim: usize,
    /// Trajectory seeds the pairs were generated from.
    pub seeds: Vec<u64>,
    records: Vec<f32>,
}

impl Dataset {
    pub fn from_pairs(pairs: &[StatePair], seeds: Vec<u64>) -> Result<Self, DataError> {
        let first = pairs.first().ok_or(DataError::Shape)?;
        let (n, d) = (first.x.len(), first.x.dim);
        let mut records = Vec::with_capacity(pairs.len() * 4 * n * d);
        for p in pairs {
            if p.x.len() != n || p.y.len() != n || p.x.dim != d || p.y.dim != d {
                return Err(DataError::Shape);
            }
            records.extend(p.x.to_input_rows());
            records.extend(p.y.to_input_rows());
        }
        Ok(Self {
            particle_count: n,
            spatial_dim: d,
            seeds,
            records,
        })
    }

    /// Floats per state (`N · 2D`).
    pub fn state_len(&self) -> usize {
        2 * self.particle_count * self.spatial_dim
    }

    pub fn len(&self) -> usize {
        self.records.len() / (2 * self.state_len())
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pair(&self, i: usize) -> StatePair {
        let s = self.state_len();
        let rec = &self.records[2 * s * i..2 * s * (i + 1)];
        StatePair {
            x: ParticleState::from_input_rows(self.spatial_dim, &rec[..s]).expect("record shape"),
            y: ParticleState::from_input_rows(self.spatial_dim, &rec[s..]).expect("record shape"),
        }
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: DATASET_VERSION,
            particle_count: self.particle_count as u32,
            spatial_dim: self.spatial_dim as u32,
            pair_count: self.len() as u64,
            seeds: self.seeds.clone(),
        }
    }

    /// The next `batch_size` pairs after `cursor`. Data is never recycled.
    pub fn sample_batch(&self, batch_size: usize, cursor: Cursor) -> Result<(Batch, Cursor), DataError> {
        let start = cursor.0 as usize;
        if start + batch_size > self.len() {
            return Err(DataError::Exhausted {
                cursor: cursor.0,
                requested: batch_size,
                available: self.len() as u64,
            });
        }
        let s = self.state_len();
        let mut batch = Batch::with_capacity(self.particle_count, self.spatial_dim, batch_size);
        for rec in self.records[2 * s * start..2 * s * (start + batch_size)].chunks(2 * s) {
            batch.x.extend_from_slice(&rec[..s]);
            batch.y.extend_from_slice(&rec[s..]);
        }
        batch.samples = batch_size;
        Ok((batch, Cursor(cursor.0 + batch_size as u64)))
    }
}

/// Position of the next unconsumed pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursor(pub u64);

impl fmt::Display for Cursor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cursor {}", self.0)
    }
}

impl FromStr for Cursor {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .strip_prefix("cursor ")
            .and_then(|v| v.parse().ok())
            .map(Cursor)
            .ok_or_else(|| DataError::Cursor(s.to_owned()))
    }
}

/// A minibatch in model layout: `samples × N × 2D` for inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub particle_count: usize,
    pub spatial_dim: usize,
    pub samples: usize,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
}

impl Batch {
    pub fn with_capacity(particle_count: usize, spatial_dim: usize, samples: usize) -> Self {
        let len = samples * particle_count * 2 * spatial_dim;
        Self {
            particle_count,
            spatial_dim,
            samples: 0,
            x: Vec::with_capacity(len),
            y: Vec::with_capacity(len),
        }
    }

    pub fn from_pairs(pairs: &[StatePair]) -> Self {
        let first = &pairs[0];
        let mut b = Self::with_capacity(first.x.len(), first.x.dim, pairs.len());
        for p in pairs {
            b.push(&p.x, &p.y);
        }
        b
    }

    pub fn push(&mut self, x: &ParticleState, y: &ParticleState) {
        self.x.extend(x.to_input_rows());
        self.y.extend(y.to_input_rows());
        self.samples += 1;
    }
}

/// Simulate one trajectory per seed and shuffle all their pairs together.
pub fn generate_dataset(cfg: &SimConfig, trajectory_seeds: &[u64], shuffle_seed: u64) -> Result<Dataset, DataError> {
    let run = |&seed: &u64| -> Result<Vec<StatePair>, DataError> { trajectory_to_pairs(&simulate_trajectory(cfg, seed)?) };
    #[cfg(feature = "parallel")]
    let streams: Result<Vec<_>, _> = {
        use rayon::prelude::*;
        trajectory_seeds.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let streams: Result<Vec<_>, _> = trajectory_seeds.iter().map(run).collect();
    let pairs = shuffle_merge(streams?, shuffle_seed);
    Dataset::from_pairs(&pairs, trajectory_seeds.to_vec())
}

/// Trajectories needed to supply `samples` pairs without reuse.
pub fn trajectories_needed(samples: u64, steps_per_trajectory: usize) -> u64 {
    samples.div_ceil(steps_per_trajectory as u64)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    let h = dataset.header();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&h.version.to_le_bytes())?;
    w.write_all(&h.particle_count.to_le_bytes())?;
    w.write_all(&h.spatial_dim.to_le_bytes())?;
    w.write_all(&h.pair_count.to_le_bytes())?;
    w.write_all(&(h.seeds.len() as u32).to_le_bytes())?;
    for s in &h.seeds {
        w.write_all(&s.to_le_bytes())?;
    }
    for v in &dataset.records {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn array<const K: usize>(&mut self, what: &str) -> Result<[u8; K], DataError> {
        let mut buf = [0u8; K];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DataError::Format {
                offset: self.offset,
                message: format!("file ends inside the {what} field"),
            },
            _ => DataError::Io(e),
        })?;
        self.offset += K as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

fn read_header<R: Read>(r: &mut ByteReader<R>) -> Result<DatasetHeader, DataError> {
    let magic: [u8; 4] = r.array("magic")?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"PDS1\""),
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(DataError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let particle_count = r.u32("particle count")?;
    let spatial_dim = r.u32("spatial dimension")?;
    if particle_count == 0 || spatial_dim == 0 {
        return Err(DataError::Format {
            offset: 8,
            message: "particle count and dimension must be positive".into(),
        });
    }
    let pair_count = r.u64("pair count")?;
    let seed_count = r.u32("seed count")?;
    let seeds = (0..seed_count).map(|_| r.u64("seed")).collect::<Result<_, _>>()?;
    Ok(DatasetHeader {
        version,
        particle_count,
        spatial_dim,
        pair_count,
        seeds,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut r = ByteReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let h = read_header(&mut r)?;
    let state_len = 2 * h.particle_count as u64 * h.spatial_dim as u64;
    let expected = h.byte_len() + h.pair_count * 2 * state_len * 4;
    if actual < expected {
        return Err(DataError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(DataError::Format {
            offset: expected,
            message: format!(
                "{} trailing bytes; header pair_count {} does not match the stored records",
                actual - expected,
                h.pair_count
            ),
        });
    }
    let mut bytes = Vec::with_capacity((expected - h.byte_len()) as usize);
    r.inner.read_to_end(&mut bytes)?;
    let records = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Dataset {
        particle_count: h.particle_count as usize,
        spatial_dim: h.spatial_dim as usize,
        seeds: h.seeds,
        records,
    })
}

/// Sequential reader over a dataset file that holds one batch in memory at a time.
pub struct DatasetReader {
    reader: ByteReader<BufReader<File>>,
    header: DatasetHeader,
    cursor: Cursor,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path)?;
        let actual = file.metadata()?.len();
        let mut reader = ByteReader {
            inner: BufReader::new(file),
            offset: 0,
        };
        let header = read_header(&mut reader)?;
        let expected = header.byte_len() + header.pair_count * 4 * header.particle_count as u64 * header.spatial_dim as u64 * 4;
        if actual != expected {
            return Err(DataError::Truncated { expected, actual });
        }
        Ok(Self {
            reader,
            header,
            cursor: Cursor(0),
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    /// Skip ahead to a saved cursor position.
    pub fn seek(&mut self, cursor: Cursor) -> Result<(), DataError> {
        use std::io::{Seek, SeekFrom};
        if cursor.0 > self.header.pair_count {
            return Err(DataError::Cursor(cursor.to_string()));
        }
        let rec = 4 * self.header.particle_count as u64 * self.header.spatial_dim as u64 * 4;
        let pos = self.header.byte_len() + cursor.0 * rec;
        self.reader.inner.seek(SeekFrom::Start(pos))?;
        self.reader.offset = pos;
        self.cursor = cursor;
        Ok(())
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch, DataError> {
        if self.cursor.0 + batch_size as u64 > self.header.pair_count {
            return Err(DataError::Exhausted {
                cursor: self.cursor.0,
                requested: batch_size,
                available: self.header.pair_count,
            });
        }
        let (n, d) = (self.header.particle_count as usize, self.header.spatial_dim as usize);
        let s = 2 * n * d;
        let mut batch = Batch::with_capacity(n, d, batch_size);
        let mut buf = vec![0u8; 8 * s];
        for _ in 0..batch_size {
            self.reader.inner.read_exact(&mut buf)?;
            self.reader.offset += buf.len() as u64;
            let vals = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")));
            let mut vals = vals.collect::<Vec<f32>>().into_iter();
            batch.x.extend(vals.by_ref().take(s));
            batch.y.extend(vals);
        }
        batch.samples = batch_size;
        self.cursor.0 += batch_size as u64;
        Ok(batch)
    }
}

/// An endless supply of fresh pairs from newly simulated trajectories.
///
/// Pairs from several trajectories are pooled and shuffled before being
/// handed out, and no pair is handed out twice.
pub struct PairStream {
    cfg: SimConfig,
    master: u64,
    next_trajectory: u64,
    pool_trajectories: usize,
    pool: Vec<StatePair>,
}

impl PairStream {
    pub fn new(cfg: SimConfig, master: u64, pool_trajectories: usize) -> Self {
        Self {
            cfg,
            master,
            next_trajectory: 0,
            pool_trajectories: pool_trajectories.max(1),
            pool: Vec::new(),
        }
    }

    fn refill(&mut self) -> Result<(), DataError> {
        let mut streams = Vec::with_capacity(self.pool_trajectories);
        for _ in 0..self.pool_trajectories {
            let seed = seeds::substream_seed(self.master, &format!("stream-trajectory-{}", self.next_trajectory));
            self.next_trajectory += 1;
            streams.push(trajectory_to_pairs(&simulate_trajectory(&self.cfg, seed)?)?);
        }
        let shuffle = seeds::substream_seed(self.master, &format!("stream-shuffle-{}", self.next_trajectory));
        let mut pairs = shuffle_merge(streams, shuffle);
        pairs.append(&mut self.pool);
        self.pool = pairs;
        Ok(())
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch, DataError> {
        while self.pool.len() < batch_size {
            self.refill()?;
        }
        let start = self.pool.len() - batch_size;
        let pairs: Vec<StatePair> = self.pool.drain(start..).collect();
        Ok(Batch::from_pairs(&pairs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(steps: usize) -> SimConfig {
        SimConfig {
            particle_count: 3,
            box_width: 6.0,
            box_height: 6.0,
            steps_per_trajectory: steps,
            ..SimConfig::default()
        }
    }

    #[test]
    fn pairs_are_consecutive() {
        let traj = simulate_trajectory(&small_cfg(1024), 0).unwrap();
        let pairs = trajectory_to_pairs(&traj).unwrap();
        assert_eq!(pairs.len(), 1024);
        assert_eq!(pairs[0].y, pairs[1].x);
        let two = trajectory_to_pairs(&traj[..2]).unwrap();
        assert_eq!(two.len(), 1);
        assert!(matches!(trajectory_to_pairs(&traj[..1]), Err(DataError::ShortTrajectory(1))));
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let a = trajectory_to_pairs(&simulate_trajectory(&small_cfg(3), 1).unwrap()).unwrap();
        let b = trajectory_to_pairs(&simulate_trajectory(&small_cfg(3), 2).unwrap()).unwrap();
        let merged = shuffle_merge(vec![a.clone(), b.clone()], 9);
        assert_eq!(merged.len(), 6);
        for p in a.iter().chain(&b) {
            assert_eq!(merged.iter().filter(|q| *q == p).count(), 1);
        }
        assert_eq!(merged, shuffle_merge(vec![a.clone(), b.clone()], 9));

        let single = trajectory_to_pairs(&simulate_trajectory(&small_cfg(8), 1).unwrap()).unwrap();
        assert_ne!(shuffle_merge(vec![single.clone()], 4), shuffle_merge(vec![single], 5));
    }

    #[test]
    fn batches_are_sequential_then_exhausted() {
        let ds = generate_dataset(&small_cfg(64), &[1, 2], 0).unwrap();
        assert_eq!(ds.len(), 128);
        let (b1, c1) = ds.sample_batch(64, Cursor(0)).unwrap();
        let (b2, c2) = ds.sample_batch(64, c1).unwrap();
        assert_eq!(c2, Cursor(128));
        assert_ne!(b1.x, b2.x);
        assert!(matches!(ds.sample_batch(64, c2), Err(DataError::Exhausted { .. })));
        assert_eq!(c1.to_string().parse::<Cursor>().unwrap(), c1);
    }

    #[test]
    fn stream_never_repeats() {
        let mut s = PairStream::new(small_cfg(16), 3, 2);
        let a = s.next_batch(20).unwrap();
        let b = s.next_batch(20).unwrap();
        let rows = |bt: &Batch| bt.x.chunks(12).map(|c| c.to_vec()).collect::<Vec<_>>();
        let (ra, rb) = (rows(&a), rows(&b));
        assert!(ra.iter().all(|r| !rb.contains(r)));
    }
}
