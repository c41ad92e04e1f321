//! Observation tables, site geometry, adjacency graphs and detection
//! histories: ingestion, validation and normalization.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// Column names for the required observation fields.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    pub site: String,
    pub period: String,
    pub y: String,
    pub k: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            site: "site".into(),
            period: "period".into(),
            y: "y".into(),
            k: "K".into(),
        }
    }
}

/// Validated site-by-period observation rows in input order.
///
/// Every column not claimed by the schema is parsed as a numeric covariate
/// shared by the occupancy and detection sides of the model; which side
/// uses which column is decided by the model specification.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub site_ids: Vec<String>,
    pub periods: Vec<i64>,
    pub y: Vec<u32>,
    pub k: Vec<u32>,
    pub covariates: IndexMap<String, Vec<f64>>,
    /// (mean, sd) recorded by `standardize_covariate` for prediction-time
    /// reuse.
    pub standardizations: BTreeMap<String, (f64, f64)>,
}

impl ObservationTable {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn new(
        site_ids: Vec<String>,
        periods: Vec<i64>,
        y: Vec<u32>,
        k: Vec<u32>,
        covariates: IndexMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let table = Self {
            site_ids,
            periods,
            y,
            k,
            covariates,
            standardizations: BTreeMap::new(),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.site_ids.len() != n || self.periods.len() != n || self.k.len() != n {
            return Err(Error::DimensionMismatch(
                "observation columns have unequal lengths".into(),
            ));
        }
        for (name, col) in &self.covariates {
            if col.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "covariate `{name}` has {} values for {n} rows",
                    col.len()
                )));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonNumeric {
                    column: name.clone(),
                    row,
                    value: col[row].to_string(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for i in 0..n {
            if self.k[i] == 0 {
                return Err(Error::ZeroVisits { row: i });
            }
            if self.y[i] > self.k[i] {
                return Err(Error::YExceedsK {
                    row: i,
                    y: self.y[i],
                    k: self.k[i],
                });
            }
            if !seen.insert((self.site_ids[i].clone(), self.periods[i])) {
                return Err(Error::DuplicateSitePeriod {
                    site: self.site_ids[i].clone(),
                    period: self.periods[i],
                });
            }
        }
        Ok(())
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        self.covariates
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    /// Unique site ids in first-appearance order with the row -> site map.
    pub fn site_index(&self) -> (Vec<String>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut map = IndexMap::new();
        let mut rows = Vec::with_capacity(self.n_rows());
        for s in &self.site_ids {
            let next = map.len();
            let idx = *map.entry(s.clone()).or_insert(next);
            if idx == ids.len() {
                ids.push(s.clone());
            }
            rows.push(idx);
        }
        (ids, rows)
    }

    /// Sorted unique periods with the row -> period-index map.
    pub fn period_index(&self) -> (Vec<i64>, Vec<usize>) {
        let uniq: BTreeSet<i64> = self.periods.iter().copied().collect();
        let uniq: Vec<i64> = uniq.into_iter().collect();
        let pos: BTreeMap<i64, usize> = uniq.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let rows = self.periods.iter().map(|p| pos[p]).collect();
        (uniq, rows)
    }

    /// Replace a covariate by (x - mean) / sd, recording the moments.
    /// The sd uses the n-1 denominator.
    pub fn standardize_covariate(&mut self, name: &str) -> Result<()> {
        let col = self
            .covariates
            .get_mut(name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))?;
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        if !(var > 0.0) {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
        self.standardizations.insert(name.to_string(), (mean, sd));
        Ok(())
    }

    /// Write as CSV: site, period, y, K, then covariates in stored order.
    /// Floats use the shortest round-tripping representation, so reading
    /// the file back reproduces the table bit for bit.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["site".to_string(), "period".into(), "y".into(), "K".into()];
        header.extend(self.covariates.keys().cloned());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n_rows() {
            let mut row = vec![
                self.site_ids[i].clone(),
                self.periods[i].to_string(),
                self.y[i].to_string(),
                self.k[i].to_string(),
            ];
            for col in self.covariates.values() {
                row.push(format!("{}", col[i]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Load and validate an observation CSV. Lines starting with `#` are
/// ignored. Columns not named by the schema become covariates.
pub fn load_observations(path: &Path, schema: &ColumnSchema) -> Result<ObservationTable> {
    let f = std::fs::File::open(path)?;
    read_observations(std::io::BufReader::new(f), schema)
}

pub fn read_observations<R: std::io::Read>(
    reader: R,
    schema: &ColumnSchema,
) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_site = find(&schema.site)?;
    let c_period = find(&schema.period)?;
    let c_y = find(&schema.y)?;
    let c_k = find(&schema.k)?;
    let special = [c_site, c_period, c_y, c_k];
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !special.contains(i))
        .map(|(i, h)| (i, h.clone()))
        .collect();

    let mut site_ids = Vec::new();
    let mut periods = Vec::new();
    let mut y = Vec::new();
    let mut k = Vec::new();
    let mut covariates: IndexMap<String, Vec<f64>> = cov_cols
        .iter()
        .map(|(_, h)| (h.clone(), Vec::new()))
        .collect();

    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let get = |c: usize| record.get(c).unwrap_or("").to_string();
        let parse_int = |c: usize, name: &str| -> Result<i64> {
            get(c).parse::<i64>().map_err(|_| Error::NonNumeric {
                column: name.to_string(),
                row: row_idx,
                value: get(c),
            })
        };
        site_ids.push(get(c_site));
        periods.push(parse_int(c_period, &schema.period)?);
        let yv = parse_int(c_y, &schema.y)?;
        let kv = parse_int(c_k, &schema.k)?;
        if yv < 0 || kv < 0 {
            return Err(Error::DomainError(format!(
                "row {row_idx}: negative count"
            )));
        }
        y.push(yv as u32);
        k.push(kv as u32);
        for (c, name) in &cov_cols {
            let raw = get(*c);
            let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
                column: name.clone(),
                row: row_idx,
                value: raw.clone(),
            })?;
            covariates.get_mut(name).unwrap().push(v);
        }
    }
    ObservationTable::new(site_ids, periods, y, k, covariates)
}

/// Raw per-visit detection histories.
#[derive(Debug, Clone, Default)]
pub struct DetectionHistoryTable {
    pub site_ids: Vec<String>,
    pub periods: Vec<i64>,
    pub histories: Vec<Vec<u8>>,
}

impl DetectionHistoryTable {
    pub fn validate(&self) -> Result<()> {
        for (i, h) in self.histories.iter().enumerate() {
            if h.is_empty() {
                return Err(Error::ZeroVisits { row: i });
            }
            if h.iter().any(|&d| d > 1) {
                return Err(Error::DomainError(format!(
                    "row {i}: history entries must be 0 or 1"
                )));
            }
        }
        Ok(())
    }
}

/// Aggregate per-visit histories to (y, K) counts per site-by-period row.
pub fn aggregate_histories(h: &DetectionHistoryTable) -> Result<ObservationTable> {
    h.validate()?;
    let y = h
        .histories
        .iter()
        .map(|hist| hist.iter().map(|&d| d as u32).sum())
        .collect();
    let k = h.histories.iter().map(|hist| hist.len() as u32).collect();
    ObservationTable::new(
        h.site_ids.clone(),
        h.periods.clone(),
        y,
        k,
        IndexMap::new(),
    )
}

/// Where a site lives: planar coordinates, an areal region label, or
/// both (continuous field plus a regional effect).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteInfo {
    pub point: Option<(f64, f64)>,
    pub region: Option<String>,
}

impl SiteInfo {
    pub fn at(x: f64, y: f64) -> Self {
        Self {
            point: Some((x, y)),
            region: None,
        }
    }

    pub fn in_region(region: &str) -> Self {
        Self {
            point: None,
            region: Some(region.to_string()),
        }
    }

    pub fn with_region(mut self, region: &str) -> Self {
        self.region = Some(region.to_string());
        self
    }
}

/// site id -> location.
#[derive(Debug, Clone, Default)]
pub struct SiteGeometry {
    pub sites: BTreeMap<String, SiteInfo>,
}

impl SiteGeometry {
    pub fn get(&self, site: &str) -> Result<&SiteInfo> {
        self.sites
            .get(site)
            .ok_or_else(|| Error::UnmappedSite(site.to_string()))
    }

    /// Every site id of the table must resolve; coordinates must be finite.
    pub fn validate_covers(&self, table: &ObservationTable) -> Result<()> {
        for s in &table.site_ids {
            if let Some((x, y)) = self.get(s)?.point {
                if !(x.is_finite() && y.is_finite()) {
                    return Err(Error::DomainError(format!(
                        "site `{s}` has non-finite coordinates"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load geometry CSV: columns `site` plus any of `x`, `y` and `region`.
pub fn load_geometry(path: &Path) -> Result<SiteGeometry> {
    let f = std::fs::File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(f));
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let site_col = headers
        .iter()
        .position(|h| h == "site")
        .ok_or_else(|| Error::MissingColumn("site".into()))?;
    let cx = headers.iter().position(|h| h == "x");
    let cy = headers.iter().position(|h| h == "y");
    let region_col = headers.iter().position(|h| h == "region");
    if (cx.is_none() || cy.is_none()) && region_col.is_none() {
        return Err(Error::MissingColumn("x,y or region".into()));
    }
    let mut geom = SiteGeometry::default();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let site = rec.get(site_col).unwrap_or("").to_string();
        let mut info = SiteInfo::default();
        if let (Some(cx), Some(cy)) = (cx, cy) {
            let parse = |c: usize, name: &str| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("");
                raw.parse().map_err(|_| Error::NonNumeric {
                    column: name.into(),
                    row,
                    value: raw.to_string(),
                })
            };
            info.point = Some((parse(cx, "x")?, parse(cy, "y")?));
        }
        if let Some(cr) = region_col {
            let r = rec.get(cr).unwrap_or("");
            if !r.is_empty() {
                info.region = Some(r.to_string());
            }
        }
        geom.sites.insert(site, info);
    }
    Ok(geom)
}

/// Undirected region adjacency without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    pub labels: Vec<String>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl AdjacencyGraph {
    pub fn n_regions(&self) -> usize {
        self.labels.len()
    }

    pub fn new(labels: Vec<String>, edge_labels: &[(String, String)]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut uniq = BTreeSet::new();
        for l in &labels {
            if !uniq.insert(l.clone()) {
                return Err(Error::DomainError(format!("duplicate region label `{l}`")));
            }
        }
        let index: BTreeMap<&String, usize> =
            labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
        let mut edges = BTreeSet::new();
        for (a, b) in edge_labels {
            let ia = *index
                .get(a)
                .ok_or_else(|| Error::DomainError(format!("unknown region `{a}` in edge")))?;
            let ib = *index
                .get(b)
                .ok_or_else(|| Error::DomainError(format!("unknown region `{b}` in edge")))?;
            if ia == ib {
                return Err(Error::DomainError(format!("self-loop on region `{a}`")));
            }
            edges.insert((ia.min(ib), ia.max(ib)));
        }
        Ok(Self { labels, edges })
    }

    pub fn region_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::DomainError(format!("unknown region `{label}`")))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == i || b == i)
            .count()
    }

    /// Connected components as sorted index lists (isolated regions are
    /// their own component).
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.n_regions();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut stack = vec![s];
            let mut comp = Vec::new();
            seen[s] = true;
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }
}

/// Parse the adjacency format: a header `regions: n` followed by one edge
/// per line, `regionA regionB`. When every label is an integer below n the
/// universe is the canonical `0..n-1`; otherwise labels are taken in order
/// of first appearance and their count must equal n.
pub fn load_adjacency(path: &Path) -> Result<AdjacencyGraph> {
    let f = std::fs::File::open(path)?;
    read_adjacency(std::io::BufReader::new(f))
}

pub fn read_adjacency<R: std::io::Read>(reader: R) -> Result<AdjacencyGraph> {
    let buf = std::io::BufReader::new(reader);
    let mut n_declared: Option<usize> = None;
    let mut edge_labels: Vec<(String, String)> = Vec::new();
    let mut seen_labels: Vec<String> = Vec::new();
    for line in buf.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("regions:") {
            n_declared = Some(rest.trim().parse().map_err(|_| {
                Error::DomainError(format!("bad region count in header `{line}`"))
            })?);
            continue;
        }
        let mut parts = line.split_whitespace();
        let a = parts.next().map(str::to_string);
        let b = parts.next().map(str::to_string);
        match (a, b) {
            (Some(a), Some(b)) => {
                for l in [&a, &b] {
                    if !seen_labels.contains(l) {
                        seen_labels.push(l.clone());
                    }
                }
                edge_labels.push((a, b));
            }
            _ => {
                return Err(Error::DomainError(format!("malformed edge line `{line}`")));
            }
        }
    }
    let n = n_declared.ok_or_else(|| Error::DomainError("missing `regions: n` header".into()))?;
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let all_numeric = seen_labels
        .iter()
        .all(|l| l.parse::<usize>().map(|v| v < n).unwrap_or(false));
    let labels: Vec<String> = if all_numeric {
        (0..n).map(|i| i.to_string()).collect()
    } else {
        if seen_labels.len() != n {
            return Err(Error::DomainError(format!(
                "header declares {n} regions but {} labels appear",
                seen_labels.len()
            )));
        }
        seen_labels
    };
    AdjacencyGraph::new(labels, &edge_labels)
}
