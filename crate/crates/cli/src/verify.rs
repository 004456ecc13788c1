use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use latte::DType;
use sha2::{Digest, Sha256};

use crate::checks::{check_names, run_checks, Bound, CheckResult, VerifyOptions};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub precision: DType,
    pub seed: u64,
    pub tolerance_overrides: BTreeMap<String, f64>,
    pub break_stabilization: bool,
    pub skip_gradients: bool,
    pub report: Option<PathBuf>,
}

/// `name=value,name=value`.
pub fn parse_overrides(s: &str) -> CliResult<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("tolerance override `{item}` is not name=value")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("tolerance `{value}` is not a number")))?;
        out.insert(name.trim().to_string(), value);
    }
    Ok(out)
}

fn digest(args: &VerifyArgs) -> String {
    let overrides: Vec<String> = args.tolerance_overrides.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
    let key = format!(
        "precision={};seed={};overrides={};break_stabilization={};skip_gradients={}",
        args.precision,
        args.seed,
        overrides.join(","),
        args.break_stabilization,
        args.skip_gradients
    );
    hex::encode(Sha256::digest(key.as_bytes()))
}

pub fn report_csv(results: &[CheckResult], digest: &str) -> String {
    let mut s = format!("# config_digest={digest}\ncheck_name,status,measured,tolerance\n");
    for r in results {
        let status = if r.passed() { "pass" } else { "fail" };
        let tol = match r.bound {
            Bound::AtMost => format!("<={:e}", r.tolerance),
            Bound::AtLeast => format!(">={:e}", r.tolerance),
        };
        writeln!(s, "{},{status},{:e},{tol}", r.name, r.measured).unwrap();
    }
    s
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> CliResult<Vec<CheckResult>> {
    if let Some(unknown) = args.tolerance_overrides.keys().find(|k| !check_names().contains(k)) {
        return Err(CliError::Usage(format!("no check named `{unknown}`")));
    }
    let opts = VerifyOptions {
        seed: args.seed,
        tolerance_overrides: args.tolerance_overrides.clone(),
        break_stabilization: args.break_stabilization,
        skip_gradients: args.skip_gradients,
    };
    let results = run_checks(args.precision, &opts);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(10);
    writeln!(out, "{:<width$}  status  measured      tolerance", "check")?;
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        let op = if r.bound == Bound::AtMost { "<=" } else { ">=" };
        writeln!(out, "{:<width$}  {status}    {:<12.4e}  {op} {:e}", r.name, r.measured, r.tolerance)?;
    }
    if let Some(path) = &args.report {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, report_csv(&results, &digest(args)))?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    writeln!(out, "{} checks, {failed} failed", results.len())?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} verification checks failed")));
    }
    Ok(results)
}
