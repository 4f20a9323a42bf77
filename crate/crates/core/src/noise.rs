//! Driving noise: Wiener increments and Poisson event streams on a fixed grid.
//!
//! Every random stream is a pure function of `(master seed, trajectory id,
//! purpose, channel)`: the first three key a ChaCha20 generator and the
//! channel selects its stream. No generator state is shared between
//! trajectories, so results do not depend on how work is scheduled.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};

const MAX_DT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Shape(format!("time grid needs t_end > 0 and dt > 0, got {t_end}, {dt}")));
        }
        if dt > MAX_DT {
            return Err(Error::Shape(format!("dt = {dt} exceeds the maximum step {MAX_DT}")));
        }
        let steps = (t_end / dt).round() as usize;
        if steps == 0 || (steps as f64 * dt - t_end).abs() > 1e-12 * t_end.max(1.0) {
            return Err(Error::Shape(format!("t_end = {t_end} is not a whole number of steps dt = {dt}")));
        }
        Ok(TimeGrid { t_end, dt, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// The same horizon with half the step size.
    pub fn refined(&self) -> TimeGrid {
        TimeGrid {
            t_end: self.t_end,
            dt: self.dt / 2.0,
            steps: self.steps * 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub master: u64,
    pub trajectory: u64,
}

impl SeedSpec {
    pub fn new(master: u64, trajectory: u64) -> Self {
        SeedSpec { master, trajectory }
    }
}

/// Independent stream families derived from one seed spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Wiener = 0x5749_454e,
    Poisson = 0x504f_4953,
    Thinning = 0x5448_494e,
    InitialState = 0x494e_4954,
}

pub fn stream(seed: SeedSpec, purpose: Purpose, channel: usize) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.master.to_le_bytes());
    key[8..16].copy_from_slice(&seed.trajectory.to_le_bytes());
    key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(channel as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle {
    grid: TimeGrid,
    channels: usize,
    seed: SeedSpec,
    /// Row-major `[steps × channels]`, each entry `N(0, dt)`.
    wiener: Vec<f64>,
    /// Per channel, strictly increasing event times in `[0, t_end]`.
    poisson: Vec<Vec<f64>>,
    /// Row-major `[steps × channels]` event counts in `[t_n, t_{n+1})`.
    jumps: Vec<u32>,
}

impl NoiseBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> SeedSpec {
        self.seed
    }

    pub fn has_wiener(&self) -> bool {
        !self.wiener.is_empty()
    }

    pub fn has_poisson(&self) -> bool {
        !self.poisson.is_empty()
    }

    pub fn wiener_increments(&self) -> &[f64] {
        &self.wiener
    }

    /// Increments of every channel over step `n`.
    pub fn dw(&self, step: usize) -> &[f64] {
        &self.wiener[step * self.channels..(step + 1) * self.channels]
    }

    pub fn events(&self, channel: usize) -> &[f64] {
        &self.poisson[channel]
    }

    /// Number of events of every channel falling in step `n`.
    pub fn jumps(&self, step: usize) -> &[u32] {
        &self.jumps[step * self.channels..(step + 1) * self.channels]
    }

    /// Channel sub-range `[start, start + count)` as a new bundle.
    pub fn select_channels(&self, start: usize, count: usize) -> Result<NoiseBundle> {
        if start + count > self.channels || count == 0 {
            return Err(Error::Shape(format!(
                "channel range {start}..{} outside 0..{}",
                start + count,
                self.channels
            )));
        }
        let pick = |v: &[f64]| -> Vec<f64> {
            if v.is_empty() {
                return Vec::new();
            }
            (0..self.grid.steps)
                .flat_map(|n| v[n * self.channels + start..n * self.channels + start + count].to_vec())
                .collect()
        };
        let wiener = pick(&self.wiener);
        let poisson = if self.poisson.is_empty() {
            Vec::new()
        } else {
            self.poisson[start..start + count].to_vec()
        };
        let jumps = bin_events(&self.grid, &poisson, count);
        Ok(NoiseBundle {
            grid: self.grid,
            channels: count,
            seed: self.seed,
            wiener,
            poisson,
            jumps,
        })
    }

    /// Build a bundle from explicit data (replays, hand-made test paths).
    pub fn from_parts(
        grid: TimeGrid,
        channels: usize,
        seed: SeedSpec,
        wiener: Vec<f64>,
        poisson: Vec<Vec<f64>>,
    ) -> Result<NoiseBundle> {
        if channels == 0 {
            return Err(Error::Shape("noise bundle needs at least one channel".into()));
        }
        if !wiener.is_empty() && wiener.len() != grid.steps * channels {
            return Err(Error::Shape(format!(
                "expected {} Wiener increments, got {}",
                grid.steps * channels,
                wiener.len()
            )));
        }
        if !poisson.is_empty() {
            if poisson.len() != channels {
                return Err(Error::Shape(format!("expected {channels} event lists, got {}", poisson.len())));
            }
            for events in &poisson {
                if events.windows(2).any(|w| w[1] <= w[0])
                    || events.iter().any(|&t| !(0.0..=grid.t_end).contains(&t))
                {
                    return Err(Error::Format("event times must be strictly increasing within [0, t_end]".into()));
                }
            }
        }
        let jumps = bin_events(&grid, &poisson, channels);
        Ok(NoiseBundle {
            grid,
            channels,
            seed,
            wiener,
            poisson,
            jumps,
        })
    }

    /// Refine to `dt/2` by splitting each increment with a Brownian bridge
    /// midpoint, so both grids see the same path. Events are kept.
    pub fn refine(&self) -> NoiseBundle {
        let fine = self.grid.refined();
        let mut wiener = Vec::with_capacity(self.wiener.len() * 2);
        if self.has_wiener() {
            let mut rngs: Vec<ChaCha20Rng> = (0..self.channels)
                .map(|c| stream(self.seed, Purpose::Wiener, c + (self.grid.steps << 32)))
                .collect();
            let half_sd = (self.grid.dt / 4.0).sqrt();
            let mut first = vec![0.0; self.channels];
            for n in 0..self.grid.steps {
                let coarse = self.dw(n);
                for c in 0..self.channels {
                    let z: f64 = rngs[c].sample(StandardNormal);
                    first[c] = 0.5 * coarse[c] + half_sd * z;
                }
                wiener.extend_from_slice(&first);
                wiener.extend(coarse.iter().zip(&first).map(|(w, a)| w - a));
            }
        }
        let jumps = bin_events(&fine, &self.poisson, self.channels);
        NoiseBundle {
            grid: fine,
            channels: self.channels,
            seed: self.seed,
            wiener,
            poisson: self.poisson.clone(),
            jumps,
        }
    }

    const MAGIC: &'static [u8; 4] = b"NBND";
    const VERSION: u32 = 1;

    /// Little-endian binary dump: magic `NBND`, version, grid, channels, seed,
    /// presence flags, then the increments and per-channel event lists.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&self.grid.t_end.to_le_bytes())?;
        w.write_all(&self.grid.dt.to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&(self.channels as u64).to_le_bytes())?;
        w.write_all(&self.seed.master.to_le_bytes())?;
        w.write_all(&self.seed.trajectory.to_le_bytes())?;
        let flags = u32::from(self.has_wiener()) | (u32::from(self.has_poisson()) << 1);
        w.write_all(&flags.to_le_bytes())?;
        for x in &self.wiener {
            w.write_all(&x.to_le_bytes())?;
        }
        for events in &self.poisson {
            w.write_all(&(events.len() as u64).to_le_bytes())?;
            for t in events {
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<NoiseBundle> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a noise bundle (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported noise bundle version {version}")));
        }
        let t_end = read_f64(&mut r)?;
        let dt = read_f64(&mut r)?;
        let steps = read_u64(&mut r)? as usize;
        let channels = read_u64(&mut r)? as usize;
        let seed = SeedSpec::new(read_u64(&mut r)?, read_u64(&mut r)?);
        let flags = read_u32(&mut r)?;
        let grid = TimeGrid::new(t_end, dt)?;
        if grid.steps != steps {
            return Err(Error::Format("grid step count does not match header".into()));
        }
        let wiener = if flags & 1 != 0 {
            (0..steps * channels).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let poisson = if flags & 2 != 0 {
            (0..channels)
                .map(|_| {
                    let count = read_u64(&mut r)? as usize;
                    (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        NoiseBundle::from_parts(grid, channels, seed, wiener, poisson)
    }
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

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn bin_events(grid: &TimeGrid, poisson: &[Vec<f64>], channels: usize) -> Vec<u32> {
    let mut jumps = vec![0u32; grid.steps * channels];
    for (c, events) in poisson.iter().enumerate() {
        for &t in events {
            let n = ((t / grid.dt).floor() as usize).min(grid.steps - 1);
            jumps[n * channels + c] += 1;
        }
    }
    jumps
}

/// `channels` independent Wiener paths, increments `N(0, dt)`.
pub fn sample_wiener(grid: &TimeGrid, channels: usize, seed: SeedSpec) -> Result<NoiseBundle> {
    if channels == 0 {
        return Err(Error::Shape("at least one channel is required".into()));
    }
    let sd = grid.dt.sqrt();
    let mut wiener = vec![0.0; grid.steps * channels];
    for c in 0..channels {
        let mut rng = stream(seed, Purpose::Wiener, c);
        for n in 0..grid.steps {
            let z: f64 = rng.sample(StandardNormal);
            wiener[n * channels + c] = sd * z;
        }
    }
    NoiseBundle::from_parts(*grid, channels, seed, wiener, Vec::new())
}

/// Rate-`rate` Poisson event times on `[0, t_end]` from one stream.
fn poisson_times(rng: &mut ChaCha20Rng, rate: f64, t_end: f64) -> Vec<f64> {
    let mut times = Vec::new();
    if rate <= 0.0 {
        return times;
    }
    let mut t = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        let next = t + e / rate;
        if next > t_end {
            break;
        }
        if next > t {
            times.push(next);
        }
        t = next;
    }
    times
}

/// Unit-intensity Poisson events per channel.
pub fn sample_unit_poisson(grid: &TimeGrid, channels: usize, seed: SeedSpec) -> Result<NoiseBundle> {
    if channels == 0 {
        return Err(Error::Shape("at least one channel is required".into()));
    }
    let poisson = (0..channels)
        .map(|c| poisson_times(&mut stream(seed, Purpose::Poisson, c), 1.0, grid.t_end))
        .collect();
    NoiseBundle::from_parts(*grid, channels, seed, Vec::new(), poisson)
}

/// Both noises on the same grid, as used by mixed runs and replays.
pub fn sample_wiener_and_poisson(grid: &TimeGrid, channels: usize, seed: SeedSpec) -> Result<NoiseBundle> {
    let w = sample_wiener(grid, channels, seed)?;
    let p = sample_unit_poisson(grid, channels, seed)?;
    NoiseBundle::from_parts(*grid, channels, seed, w.wiener, p.poisson)
}

/// Candidate stream of a rate-`cap` Poisson process with an acceptance
/// uniform attached to every candidate.
pub struct ThinningStream {
    rng: ChaCha20Rng,
    cap: f64,
    t: f64,
}

impl ThinningStream {
    pub fn new(seed: SeedSpec, channel: usize, cap: f64) -> Result<Self> {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::Shape(format!("thinning cap must be positive, got {cap}")));
        }
        Ok(ThinningStream {
            rng: stream(seed, Purpose::Thinning, channel),
            cap,
            t: 0.0,
        })
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Next `(candidate time, uniform in [0,1))`.
    pub fn next_candidate(&mut self) -> (f64, f64) {
        let e: f64 = self.rng.sample(Exp1);
        self.t += e / self.cap;
        let u: f64 = self.rng.random();
        (self.t, u)
    }

    /// Accept a candidate at intensity `lambda`; errors if `lambda` leaves `[0, cap]`.
    pub fn accept(&self, time: f64, lambda: f64, u: f64) -> Result<bool> {
        if !(lambda >= 0.0) || lambda > self.cap * (1.0 + 1e-12) {
            return Err(Error::IntensityCap {
                time,
                intensity: lambda,
                cap: self.cap,
            });
        }
        Ok(u * self.cap < lambda)
    }
}

/// Thinning of a rate-`cap` stream: a candidate at `τ` is kept with
/// probability `λ(τ)/cap`. `intensity` is called at candidate times in
/// increasing order, so it may advance a simulation up to `τ`.
pub fn sample_state_dependent_poisson(
    grid: &TimeGrid,
    mut intensity: impl FnMut(f64) -> f64,
    cap: f64,
    seed: SeedSpec,
    channel: usize,
) -> Result<Vec<f64>> {
    let mut s = ThinningStream::new(seed, channel, cap)?;
    let mut accepted = Vec::new();
    loop {
        let (t, u) = s.next_candidate();
        if t > grid.t_end {
            break;
        }
        if s.accept(t, intensity(t), u)? {
            accepted.push(t);
        }
    }
    Ok(accepted)
}
