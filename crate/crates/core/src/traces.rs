//! Trace-driven device and network latency model.
//!
//! Latencies are kept as empirical sample tables keyed by device class and
//! data size (training) or network location (upload/download). A synthetic
//! generator fills the tables around measured anchor values: per-epoch
//! training latency spread over 0.96..1.78 s/epoch at data size 60 (so five
//! epochs land on the 4.8 s / 8.9 s anchors), uploads around 1.4..1.68 s,
//! downloads around 0.361 s, with multiplicative lognormal jitter.
//!
//! Within one device class all sizes share the same jitter samples, so cell
//! means scale exactly linearly with data size and the monotonicity
//! invariant holds for every seed.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, LogNormal};

use crate::{rng, Error, Result};

/// Upload/download latency anchors of one network location (seconds).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocationAnchor {
    pub upload: f64,
    pub download: f64,
}

/// One per-client communication-cost override.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CommCostOverride {
    pub client: usize,
    pub cost: f64,
}

/// Per-client communication cost: a default plus per-client overrides.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CommCosts {
    pub default: f64,
    #[serde(default)]
    pub overrides: Vec<CommCostOverride>,
}

impl CommCosts {
    pub fn uniform(cost: f64) -> Self {
        Self {
            default: cost,
            overrides: Vec::new(),
        }
    }

    pub fn cost_for(&self, client: usize) -> f64 {
        self.overrides
            .iter()
            .find(|o| o.client == client)
            .map(|o| o.cost)
            .unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<()> {
        if self.default < 0.0 || !self.default.is_finite() {
            return Err(Error::InvalidConfig(
                "communication cost must be nonnegative".into(),
            ));
        }
        for o in &self.overrides {
            if o.cost < 0.0 || !o.cost.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "communication cost override for client {} must be nonnegative",
                    o.client
                )));
            }
        }
        Ok(())
    }
}

/// Catalog of device classes, locations and data sizes the generator
/// covers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CatalogConfig {
    /// Per-epoch training seconds of each device class at data size 60.
    pub device_bases: Vec<f64>,
    pub locations: Vec<LocationAnchor>,
    pub data_sizes: Vec<usize>,
    pub samples_per_cell: usize,
    /// Lognormal jitter sigma.
    pub sigma: f64,
    pub comm_costs: CommCosts,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        // Eight device classes spread so that five epochs at size 60 cover
        // 4.8 s (fastest) to 8.9 s (slowest).
        let n_devices = 8;
        let device_bases = (0..n_devices)
            .map(|d| 0.96 + (1.78 - 0.96) * d as f64 / (n_devices - 1) as f64)
            .collect();
        // Four locations with uploads 1.4..1.68 s, downloads around 361 ms.
        let n_locs = 4;
        let locations = (0..n_locs)
            .map(|l| LocationAnchor {
                upload: 1.4 + (1.68 - 1.4) * l as f64 / (n_locs - 1) as f64,
                download: 0.361,
            })
            .collect();
        Self {
            device_bases,
            locations,
            data_sizes: (20..=60).collect(),
            samples_per_cell: 200,
            sigma: 0.15,
            comm_costs: CommCosts::uniform(1.0),
        }
    }
}

impl CatalogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.device_bases.is_empty() || self.locations.is_empty() || self.data_sizes.is_empty()
        {
            return Err(Error::InvalidConfig("trace catalog is empty".into()));
        }
        if self.device_bases.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidConfig("device bases must be positive".into()));
        }
        if self
            .locations
            .iter()
            .any(|l| l.upload <= 0.0 || l.download <= 0.0)
        {
            return Err(Error::InvalidConfig(
                "location anchors must be positive".into(),
            ));
        }
        if self.data_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("data sizes must be positive".into()));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::InvalidConfig("need samples_per_cell >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        self.comm_costs.validate()
    }
}

/// A client device: hardware class, network location, local data size and
/// the shard it trains on.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClientProfile {
    pub client_id: usize,
    pub device: usize,
    pub location: usize,
    pub data_size: usize,
}

/// One round's latency draw for a client: probing epoch, remaining local
/// epochs, and model upload (seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyDraw {
    pub probe: f64,
    pub rest: f64,
    pub upload: f64,
}

/// Empirical latency samples per (device, data size) and per location,
/// plus per-client communication costs.
#[derive(Debug, Clone)]
pub struct TraceTable {
    train: BTreeMap<(usize, usize), Vec<f64>>,
    upload: BTreeMap<usize, Vec<f64>>,
    download: BTreeMap<usize, Vec<f64>>,
    comm_costs: CommCosts,
}

impl TraceTable {
    pub fn n_devices(&self) -> usize {
        self.train.keys().map(|&(d, _)| d + 1).max().unwrap_or(0)
    }

    pub fn n_locations(&self) -> usize {
        self.upload.keys().map(|&l| l + 1).max().unwrap_or(0)
    }

    pub fn data_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.train.keys().map(|&(_, s)| s).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    pub fn train_cell(&self, device: usize, size: usize) -> Option<&[f64]> {
        self.train.get(&(device, size)).map(Vec::as_slice)
    }

    pub fn upload_cell(&self, location: usize) -> Option<&[f64]> {
        self.upload.get(&location).map(Vec::as_slice)
    }

    pub fn download_cell(&self, location: usize) -> Option<&[f64]> {
        self.download.get(&location).map(Vec::as_slice)
    }

    pub fn comm_costs(&self) -> &CommCosts {
        &self.comm_costs
    }

    /// Checks the trace invariants: positive samples, training means
    /// nondecreasing in data size per device, upload slower than download
    /// per location.
    pub fn validate(&self) -> Result<()> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for ((d, s), samples) in &self.train {
            if samples.is_empty() || samples.iter().any(|&x| x <= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "train cell (device {d}, size {s}) has nonpositive or no samples"
                )));
            }
        }
        for (l, samples) in self.upload.iter().chain(self.download.iter()) {
            if samples.is_empty() || samples.iter().any(|&x| x <= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "location {l} has nonpositive or no samples"
                )));
            }
        }
        for d in 0..self.n_devices() {
            let mut cells: Vec<(usize, f64)> = self
                .train
                .iter()
                .filter(|((dev, _), _)| *dev == d)
                .map(|((_, s), v)| (*s, mean(v)))
                .collect();
            cells.sort_unstable_by_key(|&(s, _)| s);
            for pair in cells.windows(2) {
                if pair[1].1 < pair[0].1 {
                    return Err(Error::InvalidConfig(format!(
                        "device {d}: mean latency decreases from size {} to {}",
                        pair[0].0, pair[1].0
                    )));
                }
            }
        }
        for (l, up) in &self.upload {
            let down = self.download.get(l).ok_or_else(|| {
                Error::InvalidConfig(format!("location {l} has uploads but no downloads"))
            })?;
            if mean(up) <= mean(down) {
                return Err(Error::InvalidConfig(format!(
                    "location {l}: mean upload latency not above mean download"
                )));
            }
        }
        self.comm_costs.validate()
    }
}

/// Generates a synthetic trace table around the catalog anchors.
pub fn gen_synthetic_traces(catalog: &CatalogConfig, seed: u64) -> Result<TraceTable> {
    catalog.validate()?;
    let jitter = LogNormal::new(0.0, catalog.sigma)
        .map_err(|e| Error::InvalidConfig(format!("lognormal: {e}")))?;
    let mut train = BTreeMap::new();
    for (d, &base) in catalog.device_bases.iter().enumerate() {
        let mut r = rng::stream(seed, "trace-train", &[d as u64]);
        // One jitter vector per device, shared across sizes: cell means then
        // scale exactly with data size.
        let noise: Vec<f64> = (0..catalog.samples_per_cell)
            .map(|_| jitter.sample(&mut r))
            .collect();
        for &size in &catalog.data_sizes {
            let scale = base * size as f64 / 60.0;
            let samples: Vec<f64> = noise.iter().map(|&n| scale * n).collect();
            train.insert((d, size), samples);
        }
    }
    let mut upload = BTreeMap::new();
    let mut download = BTreeMap::new();
    for (l, anchor) in catalog.locations.iter().enumerate() {
        let mut r = rng::stream(seed, "trace-upload", &[l as u64]);
        upload.insert(
            l,
            (0..catalog.samples_per_cell)
                .map(|_| anchor.upload * jitter.sample(&mut r))
                .collect::<Vec<f64>>(),
        );
        let mut r = rng::stream(seed, "trace-download", &[l as u64]);
        download.insert(
            l,
            (0..catalog.samples_per_cell)
                .map(|_| anchor.download * jitter.sample(&mut r))
                .collect::<Vec<f64>>(),
        );
    }
    let table = TraceTable {
        train,
        upload,
        download,
        comm_costs: catalog.comm_costs.clone(),
    };
    table.validate()?;
    Ok(table)
}

fn pick(samples: &[f64], rng: &mut ChaCha12Rng) -> f64 {
    samples[rng.gen_range(0..samples.len())]
}

/// Draws one round of latencies for a client: one probe-epoch draw, the
/// remaining epochs as `epochs_post_probe` times an independent per-epoch
/// draw, and one upload draw.
pub fn sample_latency(
    table: &TraceTable,
    profile: &ClientProfile,
    epochs_post_probe: usize,
    rng: &mut ChaCha12Rng,
) -> Result<LatencyDraw> {
    let cell = table
        .train_cell(profile.device, profile.data_size)
        .ok_or_else(|| {
            Error::MissingTraceCell(format!(
                "train cell (device {}, size {})",
                profile.device, profile.data_size
            ))
        })?;
    let up = table
        .upload_cell(profile.location)
        .ok_or_else(|| Error::MissingTraceCell(format!("upload location {}", profile.location)))?;
    let probe = pick(cell, rng);
    let rest = epochs_post_probe as f64 * pick(cell, rng);
    let upload = pick(up, rng);
    Ok(LatencyDraw {
        probe,
        rest,
        upload,
    })
}

/// Draws a model-download latency for the client's location. Download time
/// is excluded from round latency and logged for completeness only.
pub fn sample_download(
    table: &TraceTable,
    profile: &ClientProfile,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let cell = table.download_cell(profile.location).ok_or_else(|| {
        Error::MissingTraceCell(format!("download location {}", profile.location))
    })?;
    Ok(pick(cell, rng))
}

/// Per-upload communication cost of a client.
pub fn comm_cost(table: &TraceTable, profile: &ClientProfile) -> f64 {
    table.comm_costs.cost_for(profile.client_id)
}

/// Randomly assigns a device class and location to each client.
pub fn assign_profiles(
    sizes: &[usize],
    n_devices: usize,
    n_locations: usize,
    seed: u64,
) -> Vec<ClientProfile> {
    let mut r = rng::stream(seed, "profiles", &[]);
    sizes
        .iter()
        .enumerate()
        .map(|(client_id, &data_size)| ClientProfile {
            client_id,
            device: r.gen_range(0..n_devices),
            location: r.gen_range(0..n_locations),
            data_size,
        })
        .collect()
}

pub fn write_profiles_jsonl(profiles: &[ClientProfile], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in profiles {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn read_profiles_jsonl(path: &Path) -> Result<Vec<ClientProfile>> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut profiles = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ClientProfile = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            file: name.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        profiles.push(p);
    }
    profiles.sort_by_key(|p| p.client_id);
    Ok(profiles)
}

/// Traces as CSV with columns
/// `kind,device_type,location,data_size,sample_seconds`; fields that do not
/// apply to a row kind stay empty.
pub fn write_trace_csv(table: &TraceTable, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "kind,device_type,location,data_size,sample_seconds")?;
    for ((d, s), samples) in &table.train {
        for v in samples {
            writeln!(f, "train,device-{d},,{s},{v}")?;
        }
    }
    for (l, samples) in &table.upload {
        for v in samples {
            writeln!(f, "upload,,loc-{l},,{v}")?;
        }
    }
    for (l, samples) in &table.download {
        for v in samples {
            writeln!(f, "download,,loc-{l},,{v}")?;
        }
    }
    Ok(())
}

fn parse_indexed(field: &str, prefix: &str) -> Option<usize> {
    field.strip_prefix(prefix)?.parse().ok()
}

/// Loads a trace CSV and validates the table invariants. Malformed rows are
/// rejected with their line number.
pub fn read_trace_csv(path: &Path, comm_costs: CommCosts) -> Result<TraceTable> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut train: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut upload: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut download: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let malformed = |line: usize, msg: String| Error::Malformed {
        file: name.clone(),
        line,
        msg,
    };
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != "kind,device_type,location,data_size,sample_seconds" {
                return Err(malformed(1, "bad header".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(malformed(lineno, format!("expected 5 fields, got {}", fields.len())));
        }
        let sample: f64 = fields[4]
            .parse()
            .map_err(|e| malformed(lineno, format!("bad sample_seconds: {e}")))?;
        if !(sample > 0.0) {
            return Err(malformed(lineno, "sample_seconds must be positive".into()));
        }
        match fields[0] {
            "train" => {
                let device = parse_indexed(fields[1], "device-")
                    .ok_or_else(|| malformed(lineno, "bad device_type".into()))?;
                let size: usize = fields[3]
                    .parse()
                    .map_err(|e| malformed(lineno, format!("bad data_size: {e}")))?;
                train.entry((device, size)).or_default().push(sample);
            }
            "upload" | "download" => {
                let loc = parse_indexed(fields[2], "loc-")
                    .ok_or_else(|| malformed(lineno, "bad location".into()))?;
                let map = if fields[0] == "upload" {
                    &mut upload
                } else {
                    &mut download
                };
                map.entry(loc).or_default().push(sample);
            }
            other => return Err(malformed(lineno, format!("unknown kind '{other}'"))),
        }
    }
    let table = TraceTable {
        train,
        upload,
        download,
        comm_costs,
    };
    table.validate()?;
    Ok(table)
}
