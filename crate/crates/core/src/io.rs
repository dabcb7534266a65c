//! CSV ingestion, flat `key = value` configuration, and the summary, trace
//! and diagnostics writers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::chain::{ChainConfig, ChainOutput, DiagnosticSeries, InitStrategy, PosteriorSummary};
use crate::error::{Result, TbmaError};
use crate::model::{Equation, PriorSpec, TobitDataset};
use crate::oracle::{CovariateDistribution, SyntheticData, SyntheticSpec, INTERCEPT_NAME};
use crate::search::ModelPrior;

/// Environment variable consulted for the seed when neither flag nor config sets it.
pub const SEED_ENV: &str = "TBMA_SEED";

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TbmaError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(TbmaError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_key_values(&std::fs::read_to_string(path)?)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(TbmaError::Config(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| TbmaError::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn parse_reals(key: &str, v: &str) -> Result<Vec<f64>> {
    parse_list(v).iter().map(|s| parse_num(key, s)).collect()
}

/// Column roles of an input CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSchema {
    pub response: String,
    /// 0/1 flag column. `None` treats rows with `response == 0` as censored.
    pub censored: Option<String>,
    pub selection: Vec<String>,
    pub outcome: Vec<String>,
    pub add_intercept_selection: bool,
    pub add_intercept_outcome: bool,
    pub standardize: bool,
}

impl DataSchema {
    pub fn new(response: &str, censored: &str, selection: &[&str], outcome: &[&str]) -> Self {
        DataSchema {
            response: response.to_string(),
            censored: Some(censored.to_string()),
            selection: selection.iter().map(|s| s.to_string()).collect(),
            outcome: outcome.iter().map(|s| s.to_string()).collect(),
            add_intercept_selection: true,
            add_intercept_outcome: true,
            standardize: false,
        }
    }

    /// Keys: `response`, `censored`, `censor_on_zero`, `selection`, `outcome`,
    /// `add_intercept_selection`, `add_intercept_outcome`, `standardize`.
    pub fn from_key_values(kv: &BTreeMap<String, String>) -> Result<Self> {
        const KNOWN: [&str; 8] = [
            "response",
            "censored",
            "censor_on_zero",
            "selection",
            "outcome",
            "add_intercept_selection",
            "add_intercept_outcome",
            "standardize",
        ];
        reject_unknown(kv, &KNOWN, "schema")?;
        let get = |k: &str| kv.get(k).map(String::as_str);
        let flag = |k: &str| get(k).map(|v| parse_bool(k, v)).transpose();
        let censor_on_zero = flag("censor_on_zero")?.unwrap_or(false);
        let censored = match (get("censored"), censor_on_zero) {
            (Some(_), true) => {
                return Err(TbmaError::Config(
                    "give either `censored` or `censor_on_zero`, not both".into(),
                ))
            }
            (Some(c), false) => Some(c.to_string()),
            (None, true) => None,
            (None, false) => {
                return Err(TbmaError::Config(
                    "schema needs a `censored` column or `censor_on_zero = true`".into(),
                ))
            }
        };
        let schema = DataSchema {
            response: get("response")
                .ok_or_else(|| TbmaError::Config("schema lacks `response`".into()))?
                .to_string(),
            censored,
            selection: get("selection").map(parse_list).unwrap_or_default(),
            outcome: get("outcome").map(parse_list).unwrap_or_default(),
            add_intercept_selection: flag("add_intercept_selection")?.unwrap_or(true),
            add_intercept_outcome: flag("add_intercept_outcome")?.unwrap_or(true),
            standardize: flag("standardize")?.unwrap_or(false),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.selection.is_empty() && !self.add_intercept_selection {
            return Err(TbmaError::Config("selection equation has no columns".into()));
        }
        if self.outcome.is_empty() && !self.add_intercept_outcome {
            return Err(TbmaError::Config("outcome equation has no columns".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("response = {}\n", self.response);
        match &self.censored {
            Some(c) => s += &format!("censored = {c}\n"),
            None => s += "censor_on_zero = true\n",
        }
        s += &format!(
            "selection = {}\noutcome = {}\nadd_intercept_selection = {}\nadd_intercept_outcome = {}\nstandardize = {}\n",
            self.selection.join(","),
            self.outcome.join(","),
            self.add_intercept_selection,
            self.add_intercept_outcome,
            self.standardize
        );
        s
    }
}

fn reject_unknown(kv: &BTreeMap<String, String>, known: &[&str], what: &str) -> Result<()> {
    match kv.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(TbmaError::Config(format!("unknown {what} key `{k}`"))),
        None => Ok(()),
    }
}

/// Location and scale applied to one column; identity when not standardized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnTransform {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnTransform {
    pub const IDENTITY: ColumnTransform = ColumnTransform { mean: 0.0, sd: 1.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub selection: Vec<ColumnTransform>,
    pub outcome: Vec<ColumnTransform>,
    pub response: ColumnTransform,
}

impl Standardization {
    /// Slope on the original scale. The selection equation has unit error
    /// variance, so only the covariate scale enters there.
    pub fn slope_to_original(&self, equation: Equation, k: usize, value: f64) -> f64 {
        match equation {
            Equation::Selection => value / self.selection[k].sd,
            Equation::Outcome => value * self.response.sd / self.outcome[k].sd,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: TobitDataset,
    pub standardization: Standardization,
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| TbmaError::Schema { column: name.to_string() })
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> ColumnTransform {
    let n = values.clone().count();
    if n < 2 {
        return ColumnTransform::IDENTITY;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    ColumnTransform {
        mean,
        sd: if sd > 0.0 { sd } else { 1.0 },
    }
}

/// Loads a dataset. Rows are kept in file order; error rows are 1-based
/// counts of data rows (the header is not counted).
pub fn load_csv(path: &Path, schema: &DataSchema) -> Result<LoadedData> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let resp = header_index(&headers, &schema.response)?;
    let cens = schema.censored.as_deref().map(|c| header_index(&headers, c)).transpose()?;
    let sel: Vec<usize> = schema.selection.iter().map(|c| header_index(&headers, c)).collect::<Result<_>>()?;
    let out: Vec<usize> = schema.outcome.iter().map(|c| header_index(&headers, c)).collect::<Result<_>>()?;

    let mut w_rows: Vec<Vec<f64>> = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut censored = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let cell = |idx: usize| -> Result<f64> {
            let text = rec.get(idx).unwrap_or("");
            text.parse::<f64>().map_err(|_| TbmaError::Parse {
                row,
                column: headers[idx].to_string(),
                message: format!("`{text}` is not a number"),
            })
        };
        let is_censored = match cens {
            Some(c) => match rec.get(c).unwrap_or("") {
                "0" => false,
                "1" => true,
                other => {
                    return Err(TbmaError::Parse {
                        row,
                        column: headers[c].to_string(),
                        message: format!("censoring flag must be 0 or 1, got `{other}`"),
                    })
                }
            },
            None => cell(resp)? == 0.0,
        };
        // censored outcomes are never read, so placeholders such as NA are allowed
        y.push(if is_censored { 0.0 } else { cell(resp)? });
        censored.push(is_censored);
        w_rows.push(sel.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
        x_rows.push(out.iter().map(|&c| cell(c)).collect::<Result<_>>()?);
    }
    let n = y.len();

    let build = |rows: &[Vec<f64>], names: &[String], intercept: bool, standardize: bool| {
        let k = names.len();
        let lead = intercept as usize;
        let transforms: Vec<ColumnTransform> = (0..k)
            .map(|j| {
                if standardize {
                    mean_sd(rows.iter().map(move |r| r[j]))
                } else {
                    ColumnTransform::IDENTITY
                }
            })
            .collect();
        let m = DMatrix::from_fn(n, k + lead, |i, j| {
            if j < lead {
                1.0
            } else {
                let t = transforms[j - lead];
                (rows[i][j - lead] - t.mean) / t.sd
            }
        });
        let mut all_names: Vec<String> = Vec::new();
        let mut all_transforms = Vec::new();
        if intercept {
            all_names.push(INTERCEPT_NAME.to_string());
            all_transforms.push(ColumnTransform::IDENTITY);
        }
        all_names.extend(names.iter().cloned());
        all_transforms.extend(transforms);
        let forced = (0..k + lead).map(|j| j < lead).collect::<Vec<bool>>();
        (m, all_names, all_transforms, forced)
    };
    let (w, names_w, tw, fw) = build(&w_rows, &schema.selection, schema.add_intercept_selection, schema.standardize);
    let (x, names_x, tx, fx) = build(&x_rows, &schema.outcome, schema.add_intercept_outcome, schema.standardize);

    let ty = if schema.standardize {
        mean_sd(y.iter().zip(&censored).filter(|(_, &c)| !c).map(|(&v, _)| v))
    } else {
        ColumnTransform::IDENTITY
    };
    let y = DVector::from_fn(n, |i, _| if censored[i] { 0.0 } else { (y[i] - ty.mean) / ty.sd });
    let dataset = TobitDataset::new(w, x, y, censored, names_w, names_x)?.with_forced(fw, fx)?;
    Ok(LoadedData {
        dataset,
        standardization: Standardization {
            selection: tw,
            outcome: tx,
            response: ty,
        },
    })
}

/// One numeric column by header name.
pub fn read_numeric_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let idx = header_index(&headers, name)?;
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let text = rec.get(idx).unwrap_or("");
            text.parse::<f64>().map_err(|_| TbmaError::Parse {
                row: i + 1,
                column: name.to_string(),
                message: format!("`{text}` is not a number"),
            })
        })
        .collect()
}

/// Writes the dataset as a CSV with a `y` and `censored` column and returns
/// the schema that reads it back. Intercept columns are left to the schema;
/// a covariate named in both equations is written once.
pub fn write_dataset_csv(dataset: &TobitDataset, path: &Path) -> Result<DataSchema> {
    let lead = |names: &[String], forced: &[bool]| {
        usize::from(names.first().map(String::as_str) == Some(INTERCEPT_NAME) && forced.first() == Some(&true))
    };
    let lw = lead(dataset.names_w(), dataset.forced_w());
    let lx = lead(dataset.names_x(), dataset.forced_x());
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut add = |name: &str, col: Vec<f64>| -> Result<()> {
        match columns.iter().find(|(n, _)| n == name) {
            Some((_, existing)) if *existing != col => Err(TbmaError::InvalidParameter(format!(
                "column `{name}` differs between the equations"
            ))),
            Some(_) => Ok(()),
            None => {
                columns.push((name.to_string(), col));
                Ok(())
            }
        }
    };
    for (k, name) in dataset.names_w().iter().enumerate().skip(lw) {
        add(name, dataset.w().column(k).iter().copied().collect())?;
    }
    for (k, name) in dataset.names_x().iter().enumerate().skip(lx) {
        add(name, dataset.x().column(k).iter().copied().collect())?;
    }
    let (response, flag) = ("y", "censored");
    if columns.iter().any(|(n, _)| n == response || n == flag) {
        return Err(TbmaError::InvalidParameter(format!(
            "covariate names `{response}` and `{flag}` are reserved"
        )));
    }

    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<&str> = columns.iter().map(|(n, _)| n.as_str()).collect();
    header.extend([response, flag]);
    wtr.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut rec: Vec<String> = columns.iter().map(|(_, c)| format!("{:?}", c[i])).collect();
        rec.push(format!("{:?}", dataset.y()[i]));
        rec.push(if dataset.censored()[i] { "1" } else { "0" }.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(DataSchema {
        response: response.to_string(),
        censored: Some(flag.to_string()),
        selection: dataset.names_w()[lw..].to_vec(),
        outcome: dataset.names_x()[lx..].to_vec(),
        add_intercept_selection: lw == 1,
        add_intercept_outcome: lx == 1,
        standardize: false,
    })
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "covariate",
    "equation",
    "incl_prob",
    "post_mean",
    "post_sd",
    "cond_mean",
    "cond_sd",
];

/// Summary table; reals use six decimals, absent conditional moments are `NA`.
pub fn write_summary(summary: &PosteriorSummary, path: &Path) -> Result<()> {
    if summary.rows.is_empty() {
        return Err(TbmaError::EmptyChain);
    }
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record(SUMMARY_HEADER)?;
    let opt = |v: Option<f64>| v.map(fixed).unwrap_or_else(|| "NA".to_string());
    for r in &summary.rows {
        wtr.write_record([
            r.covariate.clone(),
            r.equation.as_str().to_string(),
            fixed(r.incl_prob),
            fixed(r.post_mean),
            fixed(r.post_sd),
            opt(r.cond_mean),
            opt(r.cond_sd),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Summary rows as text cells, for checks on emitted files.
pub fn read_summary(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn unbits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(TbmaError::Config(format!("bad mask `{s}`"))),
        })
        .collect()
}

/// Trace CSV, one row per held record. Leading `#` lines carry the chain id,
/// fingerprints and forced masks. Reals use shortest round-trip formatting.
pub fn write_trace(output: &ChainOutput, path: &Path) -> Result<()> {
    if output.is_empty() {
        return Err(TbmaError::EmptyChain);
    }
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# chain_id = {}", output.chain_id)?;
    writeln!(file, "# dataset_fingerprint = {}", output.dataset_fingerprint)?;
    writeln!(file, "# config_fingerprint = {}", output.config_fingerprint)?;
    writeln!(file, "# forced_selection = {}", bits(&output.forced_w))?;
    writeln!(file, "# forced_outcome = {}", bits(&output.forced_x))?;
    let mut wtr = csv::Writer::from_writer(file);
    let mut header = vec![
        "sweep".to_string(),
        "burn_in".into(),
        "accepted".into(),
        "gamma".into(),
        "phi".into(),
    ];
    for prefix in ["in", "coef"] {
        for k in 0..output.width() {
            let (name, eq) = output.column(k);
            header.push(format!("{prefix}:{}:{name}", eq.as_str()));
        }
    }
    wtr.write_record(&header)?;
    for r in 0..output.len() {
        let mut rec = vec![
            output.sweeps[r].to_string(),
            (output.burn_in[r] as u8).to_string(),
            (output.accepted[r] as u8).to_string(),
            format!("{:?}", output.gamma[r]),
            format!("{:?}", output.phi[r]),
        ];
        rec.extend(output.inclusion_row(r).iter().map(|&b| (b as u8).to_string()));
        rec.extend(output.coef_row(r).iter().map(|v| format!("{v:?}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<ChainOutput> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut meta_text = String::new();
    let mut line = String::new();
    let mut body = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        if let Some(rest) = line.strip_prefix('#') {
            meta_text.push_str(rest);
        } else {
            body.push_str(&line);
            std::io::Read::read_to_string(&mut reader, &mut body)?;
            break;
        }
    }
    let meta = parse_key_values(&meta_text)?;
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| TbmaError::Config(format!("trace lacks `{k}`")));
    let forced_w = unbits(&get("forced_selection")?)?;
    let forced_x = unbits(&get("forced_outcome")?)?;
    let (p, q) = (forced_w.len(), forced_x.len());
    let width = p + q;

    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.len() != 5 + 2 * width {
        return Err(TbmaError::Config(format!(
            "trace has {} columns, expected {}",
            headers.len(),
            5 + 2 * width
        )));
    }
    let name_of = |k: usize| -> Result<String> {
        let h = &headers[5 + k];
        h.splitn(3, ':')
            .nth(2)
            .map(str::to_string)
            .ok_or_else(|| TbmaError::Config(format!("bad trace column `{h}`")))
    };
    let names_w = (0..p).map(name_of).collect::<Result<Vec<_>>>()?;
    let names_x = (p..width).map(name_of).collect::<Result<Vec<_>>>()?;
    let mut out = ChainOutput {
        chain_id: parse_num("chain_id", &get("chain_id")?)?,
        names_w,
        names_x,
        forced_w,
        forced_x,
        sweeps: Vec::new(),
        burn_in: Vec::new(),
        accepted: Vec::new(),
        gamma: Vec::new(),
        phi: Vec::new(),
        inclusion: Vec::new(),
        coefs: Vec::new(),
        dataset_fingerprint: get("dataset_fingerprint")?,
        config_fingerprint: get("config_fingerprint")?,
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let num = |c: usize| -> Result<f64> {
            rec[c].parse::<f64>().map_err(|_| TbmaError::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("`{}` is not a number", &rec[c]),
            })
        };
        let flag = |c: usize| -> Result<bool> {
            match &rec[c] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(TbmaError::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: format!("expected 0 or 1, got `{other}`"),
                }),
            }
        };
        out.sweeps.push(rec[0].parse().map_err(|_| TbmaError::Parse {
            row,
            column: "sweep".into(),
            message: format!("`{}` is not a sweep index", &rec[0]),
        })?);
        out.burn_in.push(flag(1)?);
        out.accepted.push(flag(2)?);
        out.gamma.push(num(3)?);
        out.phi.push(num(4)?);
        for k in 0..width {
            out.inclusion.push(flag(5 + k)?);
        }
        for k in 0..width {
            out.coefs.push(num(5 + width + k)?);
        }
    }
    Ok(out)
}

pub fn write_diagnostics(series: &DiagnosticSeries, path: &Path) -> Result<()> {
    if series.sweep.is_empty() {
        return Err(TbmaError::EmptyChain);
    }
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    wtr.write_record([
        "sweep",
        "running_size_selection",
        "running_size_outcome",
        "cumulative_jump_rate",
    ])?;
    for i in 0..series.sweep.len() {
        wtr.write_record([
            series.sweep[i].to_string(),
            fixed(series.running_size_selection[i]),
            fixed(series.running_size_outcome[i]),
            fixed(series.cumulative_jump_rate[i]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Run settings given on the command line; `None` defers to the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOverrides {
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub chains: Option<usize>,
    pub seed: Option<u64>,
    pub thin: Option<usize>,
    pub inner_moves: Option<usize>,
    pub init: Option<InitStrategy>,
}

/// Flag, then config key, then `TBMA_SEED` (seed only), then default.
pub fn resolve_chain_config(
    file: &BTreeMap<String, String>,
    flags: &RunOverrides,
    env_seed: Option<&str>,
) -> Result<ChainConfig> {
    const KNOWN: [&str; 8] = [
        "iterations",
        "burn_in",
        "chains",
        "seed",
        "thin",
        "inner_moves",
        "init",
        "retain_burn_in",
    ];
    reject_unknown(file, &KNOWN, "run config")?;
    let d = ChainConfig::default();
    let from_file = |k: &str| -> Result<Option<usize>> { file.get(k).map(|v| parse_num(k, v)).transpose() };
    let env = env_seed.map(|v| parse_num::<u64>(SEED_ENV, v)).transpose()?;
    let file_seed = file.get("seed").map(|v| parse_num::<u64>("seed", v)).transpose()?;
    let init = match (flags.init, file.get("init")) {
        (Some(i), _) => i,
        (None, Some(v)) => InitStrategy::parse(v)?,
        (None, None) => d.init,
    };
    let config = ChainConfig {
        iterations: flags.iterations.or(from_file("iterations")?).unwrap_or(d.iterations),
        burn_in: flags.burn_in.or(from_file("burn_in")?).unwrap_or(d.burn_in),
        seed: flags.seed.or(file_seed).or(env).unwrap_or(d.seed),
        chains: flags.chains.or(from_file("chains")?).unwrap_or(d.chains),
        thin: flags.thin.or(from_file("thin")?).unwrap_or(d.thin),
        inner_moves: flags.inner_moves.or(from_file("inner_moves")?).unwrap_or(d.inner_moves),
        init,
        retain_burn_in: file
            .get("retain_burn_in")
            .map(|v| parse_bool("retain_burn_in", v))
            .transpose()?
            .unwrap_or(d.retain_burn_in),
    };
    config.validate()?;
    Ok(config)
}

/// Prior from keys `theta_mean`, `theta_var`, `beta_mean`, `beta_var`
/// (scalars applied to every coefficient, intercepts included), `gamma_mean`,
/// `gamma_var`, `s0`, `S0`, and `model_prior` (`flat` or `bernoulli:<pi>`).
/// Missing keys take the defaults of [`PriorSpec::default_for`].
pub fn prior_from_key_values(kv: &BTreeMap<String, String>, p: usize, q: usize) -> Result<PriorSpec> {
    const KNOWN: [&str; 9] = [
        "theta_mean",
        "theta_var",
        "beta_mean",
        "beta_var",
        "gamma_mean",
        "gamma_var",
        "s0",
        "S0",
        "model_prior",
    ];
    reject_unknown(kv, &KNOWN, "prior")?;
    let mut prior = PriorSpec::default_for(p, q);
    let num = |k: &str| kv.get(k).map(|v| parse_num::<f64>(k, v)).transpose();
    if let Some(m) = num("theta_mean")? {
        prior.theta0.fill(m);
    }
    if let Some(v) = num("theta_var")? {
        prior.theta_cov = DMatrix::identity(p, p) * v;
    }
    if let Some(m) = num("beta_mean")? {
        prior.beta0.fill(m);
    }
    if let Some(v) = num("beta_var")? {
        prior.beta_cov = DMatrix::identity(q, q) * v;
    }
    prior.gamma0 = num("gamma_mean")?.unwrap_or(prior.gamma0);
    prior.gamma_var = num("gamma_var")?.unwrap_or(prior.gamma_var);
    prior.s0 = num("s0")?.unwrap_or(prior.s0);
    prior.big_s0 = num("S0")?.unwrap_or(prior.big_s0);
    if let Some(v) = kv.get("model_prior") {
        prior.model_prior = match v.split_once(':') {
            None if v == "flat" => ModelPrior::Flat,
            Some(("bernoulli", pi)) => ModelPrior::Bernoulli(parse_num("model_prior", pi)?),
            _ => return Err(TbmaError::Config(format!("unknown model_prior `{v}`"))),
        };
    }
    prior.validate()?;
    Ok(prior)
}

/// Generator settings from keys `n`, `theta`, `beta` (comma lists), `gamma`,
/// `phi`, `covariates` (`normal` or `uniform:<low>:<high>`), `intercept`, `seed`.
pub fn synthetic_spec_from_key_values(kv: &BTreeMap<String, String>) -> Result<SyntheticSpec> {
    const KNOWN: [&str; 8] = ["n", "theta", "beta", "gamma", "phi", "covariates", "intercept", "seed"];
    reject_unknown(kv, &KNOWN, "generator")?;
    let get = |k: &str| kv.get(k).ok_or_else(|| TbmaError::Config(format!("generator spec lacks `{k}`")));
    let covariates = match kv.get("covariates").map(String::as_str) {
        None | Some("normal") => CovariateDistribution::StandardNormal,
        Some(v) => match v.split(':').collect::<Vec<_>>()[..] {
            ["uniform", lo, hi] => CovariateDistribution::Uniform {
                low: parse_num("covariates", lo)?,
                high: parse_num("covariates", hi)?,
            },
            _ => return Err(TbmaError::Config(format!("unknown covariate distribution `{v}`"))),
        },
    };
    Ok(SyntheticSpec {
        n: parse_num("n", get("n")?)?,
        true_theta: parse_reals("theta", get("theta")?)?,
        true_beta: parse_reals("beta", get("beta")?)?,
        gamma: parse_num("gamma", get("gamma")?)?,
        phi: parse_num("phi", get("phi")?)?,
        covariates,
        intercept: kv.get("intercept").map(|v| parse_bool("intercept", v)).transpose()?.unwrap_or(true),
        seed: kv.get("seed").map(|v| parse_num("seed", v)).transpose()?.unwrap_or(0),
    })
}

/// Generator truth as `key = value` text.
pub fn write_truth(data: &SyntheticData, path: &Path) -> Result<()> {
    let join = |v: &DVector<f64>| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let ds = &data.dataset;
    let text = format!(
        "selection_names = {}\noutcome_names = {}\ntheta = {}\nbeta = {}\ngamma = {:?}\nphi = {:?}\nn = {}\ncensoring_fraction = {:?}\n",
        ds.names_w().join(","),
        ds.names_x().join(","),
        join(&data.truth.theta),
        join(&data.truth.beta),
        data.sigma.gamma,
        data.sigma.phi,
        ds.n(),
        data.censoring_fraction,
    );
    std::fs::write(path, text)?;
    Ok(())
}
