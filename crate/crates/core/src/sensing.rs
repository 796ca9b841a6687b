//! Observation construction.
//!
//! Layout of the 96-wide vector (offsets into [`Observation`]):
//!
//! | block            | width | normalization |
//! |------------------|-------|---------------|
//! | body velocity    | 3     | z-score       |
//! | body accel       | 3     | z-score       |
//! | heading error    | 1     | z-score       |
//! | lidar ranges     | 72    | range / 20 m  |
//! | previous steer   | 1     | z-score       |
//! | wall flag        | 1     | raw 0/1       |
//! | car flag         | 1     | raw 0/1       |
//! | curvature ahead  | 14    | z-score       |

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::geom::{OrientedRect, Segment, Vec2};
use crate::track::{TrackFrame, TrackGeometry, LOOKAHEAD_LEN, LOOKAHEAD_TIMES};
use crate::vehicle::{CarParams, VehicleState};
use crate::{Result, SimError};

pub const OBS_DIM: usize = 96;
pub const LIDAR_BEAMS: usize = 72;
pub const LIDAR_RANGE: f64 = 20.0;
pub const LIDAR_HALF_FOV_DEG: f64 = 108.0;
/// Returns closer than this are reported at this distance to keep ranges positive.
const LIDAR_MIN_RANGE: f64 = 1e-3;

pub const IDX_VELOCITY: usize = 0;
pub const IDX_ACCEL: usize = 3;
pub const IDX_HEADING_ERR: usize = 6;
pub const IDX_LIDAR: usize = 7;
pub const IDX_PREV_STEER: usize = IDX_LIDAR + LIDAR_BEAMS;
pub const IDX_WALL_FLAG: usize = IDX_PREV_STEER + 1;
pub const IDX_CAR_FLAG: usize = IDX_WALL_FLAG + 1;
pub const IDX_CURVATURE: usize = IDX_CAR_FLAG + 1;

/// Number of z-scored features.
pub const Z_DIM: usize = 7 + 1 + LOOKAHEAD_LEN;

/// Observation positions that are z-scored, in storage order of [`NormStats`].
pub const Z_INDICES: [usize; Z_DIM] = z_indices();

const fn z_indices() -> [usize; Z_DIM] {
    let mut out = [0; Z_DIM];
    let mut k = 0;
    while k < 7 {
        out[k] = k;
        k += 1;
    }
    out[7] = IDX_PREV_STEER;
    let mut j = 0;
    while j < LOOKAHEAD_LEN {
        out[8 + j] = IDX_CURVATURE + j;
        j += 1;
    }
    out
}

const LAYOUT_DESCRIPTOR: &str = "v3|vdot3|theta1|lidar72@20m:-108..108|delta1|f_wall1|f_car1|curv14@0.2..3.0s";
const STATS_MAGIC: &[u8; 4] = b"OTNS";
const STATS_VERSION: u32 = 1;

pub fn beam_angle(j: usize) -> f64 {
    let span = 2.0 * LIDAR_HALF_FOV_DEG;
    (-LIDAR_HALF_FOV_DEG + j as f64 * span / (LIDAR_BEAMS - 1) as f64).to_radians()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarScan {
    pub ranges: [f64; LIDAR_BEAMS],
}

/// Casts every beam from `origin` and keeps the nearest hit among the wall
/// segments and rectangles. Misses report the maximum range.
pub fn cast_rays(origin: Vec2, heading: f64, walls: &[Segment], rects: &[OrientedRect]) -> LidarScan {
    let reach = LIDAR_RANGE + 1e-9;
    let near: Vec<&Segment> = walls
        .iter()
        .filter(|s| {
            s.a.x.min(s.b.x) <= origin.x + reach
                && s.a.x.max(s.b.x) >= origin.x - reach
                && s.a.y.min(s.b.y) <= origin.y + reach
                && s.a.y.max(s.b.y) >= origin.y - reach
        })
        .collect();
    let rects: Vec<&OrientedRect> = rects
        .iter()
        .filter(|r| (r.center - origin).norm() <= reach + r.bounding_radius())
        .collect();
    let mut ranges = [LIDAR_RANGE; LIDAR_BEAMS];
    for (j, range) in ranges.iter_mut().enumerate() {
        let dir = Vec2::from_angle(heading + beam_angle(j));
        let mut best = LIDAR_RANGE;
        for s in &near {
            if let Some(t) = s.ray_hit(origin, dir) {
                best = best.min(t);
            }
        }
        for r in &rects {
            if let Some(t) = r.ray_hit(origin, dir) {
                best = best.min(t);
            }
        }
        *range = best.clamp(LIDAR_MIN_RANGE, LIDAR_RANGE);
    }
    LidarScan { ranges }
}

/// Lidar from the ego's center against the track walls and the other cars.
pub fn cast_lidar(ego: &VehicleState, track: &TrackGeometry, others: &[VehicleState], params: &CarParams) -> LidarScan {
    let rects: Vec<OrientedRect> = others.iter().map(|c| c.footprint(params)).collect();
    cast_rays(ego.position, ego.heading, track.walls(), &rects)
}

pub fn heading_error(ego: &VehicleState, frame: &TrackFrame) -> f64 {
    crate::geom::wrap_angle(ego.heading - frame.tangent_heading)
}

/// Unnormalized feature vector in observation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawFeatures(pub [f64; OBS_DIM]);

pub fn raw_features(ego: &VehicleState, scan: &LidarScan, frame: &TrackFrame, track: &TrackGeometry) -> RawFeatures {
    let mut f = [0.0; OBS_DIM];
    f[IDX_VELOCITY..IDX_VELOCITY + 3].copy_from_slice(&ego.body_velocity);
    f[IDX_ACCEL..IDX_ACCEL + 3].copy_from_slice(&ego.body_acceleration);
    f[IDX_HEADING_ERR] = heading_error(ego, frame);
    f[IDX_LIDAR..IDX_LIDAR + LIDAR_BEAMS].copy_from_slice(&scan.ranges);
    f[IDX_PREV_STEER] = ego.prev_steering;
    f[IDX_WALL_FLAG] = if ego.wall_flag { 1.0 } else { 0.0 };
    f[IDX_CAR_FLAG] = if ego.car_flag { 1.0 } else { 0.0 };
    let curv = track.curvature_lookahead(frame, ego.speed, &LOOKAHEAD_TIMES);
    f[IDX_CURVATURE..IDX_CURVATURE + LOOKAHEAD_LEN].copy_from_slice(&curv);
    RawFeatures(f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f32; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Streaming per-feature mean and standard deviation of the z-scored block.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    count: u64,
    mean: [f64; Z_DIM],
    m2: [f64; Z_DIM],
    std: [f64; Z_DIM],
    frozen: bool,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats::new()
    }
}

impl NormStats {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn new() -> Self {
        NormStats {
            count: 0,
            mean: [0.0; Z_DIM],
            m2: [0.0; Z_DIM],
            std: [1.0; Z_DIM],
            frozen: false,
        }
    }

    /// Frozen statistics with explicit moments (values are rounded to f32).
    pub fn from_moments(mean: [f64; Z_DIM], std: [f64; Z_DIM], count: u64) -> Self {
        NormStats {
            count,
            mean: mean.map(|m| m as f32 as f64),
            m2: [0.0; Z_DIM],
            std: std.map(|s| s.max(Self::STD_FLOOR) as f32 as f64),
            frozen: true,
        }
    }

    /// Frozen mean-0 / std-1 statistics: normalization only rescales lidar.
    pub fn identity() -> Self {
        NormStats::from_moments([0.0; Z_DIM], [1.0; Z_DIM], 0)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn mean(&self) -> &[f64; Z_DIM] {
        &self.mean
    }

    /// Population standard deviation, floored.
    pub fn std(&self) -> [f64; Z_DIM] {
        if self.frozen {
            return self.std;
        }
        let mut out = [Self::STD_FLOOR; Z_DIM];
        if self.count > 0 {
            for (o, m2) in out.iter_mut().zip(&self.m2) {
                *o = (m2 / self.count as f64).sqrt().max(Self::STD_FLOOR);
            }
        }
        out
    }

    /// Welford update with one raw feature vector.
    pub fn update(&mut self, raw: &RawFeatures) -> Result<()> {
        if self.frozen {
            return Err(SimError::contract("normalization statistics are frozen"));
        }
        self.count += 1;
        let n = self.count as f64;
        for (k, &idx) in Z_INDICES.iter().enumerate() {
            let x = raw.0[idx];
            let delta = x - self.mean[k];
            self.mean[k] += delta / n;
            self.m2[k] += delta * (x - self.mean[k]);
        }
        Ok(())
    }

    /// Fixes the statistics. Moments are rounded to f32 so that a reloaded
    /// file normalizes bit-identically.
    pub fn freeze(&mut self) {
        if self.frozen {
            return;
        }
        let std = self.std();
        *self = NormStats::from_moments(self.mean, std, self.count);
    }

    pub fn normalize(&self, raw: &RawFeatures) -> Result<Observation> {
        if !self.frozen {
            return Err(SimError::contract("normalization statistics must be frozen before use"));
        }
        let mut out = [0f32; OBS_DIM];
        for (k, &idx) in Z_INDICES.iter().enumerate() {
            out[idx] = ((raw.0[idx] - self.mean[k]) / self.std[k]) as f32;
        }
        for j in 0..LIDAR_BEAMS {
            out[IDX_LIDAR + j] = (raw.0[IDX_LIDAR + j] / LIDAR_RANGE) as f32;
        }
        out[IDX_WALL_FLAG] = raw.0[IDX_WALL_FLAG] as f32;
        out[IDX_CAR_FLAG] = raw.0[IDX_CAR_FLAG] as f32;
        Ok(Observation(out))
    }

    /// Identifies the feature layout together with the frozen moments.
    pub fn layout_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(LAYOUT_DESCRIPTOR.as_bytes());
        for v in self.mean.iter().chain(self.std.iter()) {
            h.update((*v as f32).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if !self.frozen {
            return Err(SimError::contract("only frozen statistics can be persisted"));
        }
        w.write_all(STATS_MAGIC)?;
        w.write_all(&STATS_VERSION.to_le_bytes())?;
        w.write_all(&self.count.to_le_bytes())?;
        w.write_all(&self.layout_hash().to_le_bytes())?;
        w.write_all(&(Z_DIM as u32).to_le_bytes())?;
        for v in self.mean.iter().chain(self.std.iter()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATS_MAGIC {
            return Err(SimError::config("not a normalization statistics file"));
        }
        let version = read_u32(&mut r)?;
        if version != STATS_VERSION {
            return Err(SimError::config(format!("unsupported statistics version {version}")));
        }
        let count = read_u64(&mut r)?;
        let hash = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        if n != Z_DIM {
            return Err(SimError::config(format!(
                "statistics cover {n} features, this build expects {Z_DIM}"
            )));
        }
        let mut mean = [0.0; Z_DIM];
        let mut std = [0.0; Z_DIM];
        for v in mean.iter_mut().chain(std.iter_mut()) {
            *v = read_f32(&mut r)? as f64;
        }
        let stats = NormStats::from_moments(mean, std, count);
        if stats.layout_hash() != hash {
            return Err(SimError::config(format!(
                "statistics layout hash {hash:016x} does not match contents {:016x}",
                stats.layout_hash()
            )));
        }
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| SimError::config(format!("cannot open statistics {}: {e}", path.display())))?;
        NormStats::read_from(std::io::BufReader::new(f))
    }
}

pub fn assemble_observation(
    ego: &VehicleState,
    scan: &LidarScan,
    frame: &TrackFrame,
    track: &TrackGeometry,
    stats: &NormStats,
) -> Result<Observation> {
    stats.normalize(&raw_features(ego, scan, frame, track))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}
