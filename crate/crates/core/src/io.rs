//! CSV artifacts. Every file has a header row and numbers carry 17
//! significant digits.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::calib::{CalibrationReport, ReportRow, TraceRow};
use crate::config::Problem;
use crate::error::{Error, Result};
use crate::grid::{fmt17, Field2D, SpatialGrid2D, TimeGrid};
use crate::validate::{FpResidual, McEstimate};

/// Buffered file writer, creating parent directories.
pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// One row of `market.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketQuote {
    pub maturity_days: u32,
    pub strike: f64,
    pub price: f64,
    pub implied_vol: f64,
}

pub fn write_market<W: Write>(w: W, quotes: &[MarketQuote]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["maturity_days", "strike", "price", "implied_vol"])?;
    for q in quotes {
        out.write_record([q.maturity_days.to_string(), fmt17(q.strike), fmt17(q.price), fmt17(q.implied_vol)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_market<R: Read>(r: R) -> Result<Vec<MarketQuote>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut quotes = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> { rec.get(k).ok_or_else(|| Error::Invalid(format!("market row has {} fields", rec.len()))) };
        let num = |k: usize| -> Result<f64> {
            field(k)?.trim().parse().map_err(|e| Error::Invalid(format!("market column {k}: {e}")))
        };
        quotes.push(MarketQuote {
            maturity_days: field(0)?.trim().parse().map_err(|e| Error::Invalid(format!("maturity_days: {e}")))?,
            strike: num(1)?,
            price: num(2)?,
            implied_vol: num(3)?,
        });
    }
    Ok(quotes)
}

pub fn load_market(path: &Path) -> Result<Vec<MarketQuote>> {
    read_market(open(path)?)
}

fn write_rows<W: Write>(w: W, rows: &[ReportRow], with_grad: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["maturity_days", "strike", "market_price", "model_price", "market_iv", "model_iv", "abs_iv_error"];
    if with_grad {
        header.push("grad");
    }
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.maturity_days.to_string(),
            fmt17(r.strike),
            fmt17(r.market_price),
            fmt17(r.model_price),
            fmt17(r.market_iv),
            fmt17(r.model_iv),
            fmt17((r.model_iv - r.market_iv).abs()),
        ];
        if with_grad {
            rec.push(fmt17(r.grad));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// `prices.csv`: market against model quotes.
pub fn write_prices<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    write_rows(w, rows, false)
}

/// `report.csv`: the price table plus the final gradient per instrument.
pub fn write_report<W: Write>(w: W, report: &CalibrationReport) -> Result<()> {
    write_rows(w, &report.rows, true)
}

pub fn write_lambda<W: Write>(w: W, lambda: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["instrument_id", "lambda"])?;
    for (i, l) in lambda.iter().enumerate() {
        out.write_record([i.to_string(), fmt17(*l)])?;
    }
    out.flush()?;
    Ok(())
}

/// `trace.csv`; `iter` counts across epochs.
pub fn write_trace<W: Write>(w: W, trace: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iter", "L", "grad_supnorm", "wall_ms", "epoch"])?;
    for (n, t) in trace.iter().enumerate() {
        out.write_record([n.to_string(), fmt17(t.l), fmt17(t.grad_sup), fmt17(t.wall_ms), t.epoch.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Path of the slice dump `{prefix}_t{k}.csv`.
pub fn slice_path(dir: &Path, prefix: &str, k: usize) -> PathBuf {
    dir.join(format!("{prefix}_t{k}.csv"))
}

/// Writes one file per slice.
pub fn write_slices(dir: &Path, prefix: &str, slices: &[Field2D]) -> Result<()> {
    for (k, f) in slices.iter().enumerate() {
        let mut w = create(&slice_path(dir, prefix, k))?;
        f.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Reads `n` slices written by [`write_slices`].
pub fn read_slices(dir: &Path, prefix: &str, grid: SpatialGrid2D, n: usize) -> Result<Vec<Field2D>> {
    (0..n).map(|k| Field2D::read_csv(grid, open(&slice_path(dir, prefix, k))?)).collect()
}

/// `paths_sample.csv` from `(path, node, z, r)` rows.
pub fn write_paths_sample<W: Write>(w: W, time: &TimeGrid, rows: &[(usize, usize, f64, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "path_id", "S", "r"])?;
    for &(p, k, z, r) in rows {
        out.write_record([fmt17(time.t(k)), p.to_string(), fmt17(z.exp()), fmt17(r)])?;
    }
    out.flush()?;
    Ok(())
}

/// `density_check.csv`.
pub fn write_density_check<W: Write>(w: W, time: &TimeGrid, rows: &[FpResidual]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "testfn_id", "lhs", "rhs", "err_bar"])?;
    for r in rows {
        out.write_record([fmt17(time.t(r.node)), r.function.to_string(), fmt17(r.lhs), fmt17(r.rhs), fmt17(r.error_bar())])?;
    }
    out.flush()?;
    Ok(())
}

/// One strike of an implied-volatility skew under three models.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewRow {
    pub strike: f64,
    pub generating_iv: f64,
    pub reference_iv: f64,
    pub calibrated_iv: f64,
}

/// `skew_{maturity}.csv`.
pub fn write_skew<W: Write>(w: W, rows: &[SkewRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["strike", "generating_iv", "reference_iv", "calibrated_iv"])?;
    for r in rows {
        out.write_record([fmt17(r.strike), fmt17(r.generating_iv), fmt17(r.reference_iv), fmt17(r.calibrated_iv)])?;
    }
    out.flush()?;
    Ok(())
}

/// PDE against Monte Carlo price of one call.
#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub maturity_days: u32,
    pub strike: f64,
    pub pde_price: f64,
    pub mc: McEstimate,
}

/// `mc_prices.csv`.
pub fn write_mc_prices<W: Write>(w: W, rows: &[McRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["maturity_days", "strike", "pde_price", "mc_price", "std_err"])?;
    for r in rows {
        out.write_record([r.maturity_days.to_string(), fmt17(r.strike), fmt17(r.pde_price), fmt17(r.mc.mean), fmt17(r.mc.std_err)])?;
    }
    out.flush()?;
    Ok(())
}

/// Quotes of the problem's instruments at `prices`.
pub fn market_quotes(problem: &Problem, prices: &[f64]) -> Result<Vec<MarketQuote>> {
    problem
        .instruments
        .iter()
        .zip(prices)
        .enumerate()
        .map(|(i, (inst, &price))| {
            Ok(MarketQuote { maturity_days: inst.maturity_days, strike: inst.strike, price, implied_vol: problem.implied_vol(i, price)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn market_round_trip_is_exact() {
        let quotes = vec![
            MarketQuote { maturity_days: 60, strike: 85.0, price: 11.366_612_345_678_91, implied_vol: 0.1 + 0.2 },
            MarketQuote { maturity_days: 120, strike: 120.0, price: 2.7493e-3, implied_vol: 1.0 / 3.0 },
        ];
        let mut buf = Vec::new();
        write_market(&mut buf, &quotes).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("maturity_days,strike,price,implied_vol\n"));
        assert_eq!(read_market(buf.as_slice()).unwrap(), quotes);
    }

    #[test]
    fn empty_market_is_header_only() {
        let mut buf = Vec::new();
        write_market(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "maturity_days,strike,price,implied_vol\n");
    }

    #[test]
    fn slices_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SpatialGrid2D::new(4.0, 5.0, 0.0, 5.0, 5, 4).unwrap();
        let slices: Vec<Field2D> = (0..3).map(|k| Field2D::from_fn(grid, |z, r| (z * r + k as f64).sin())).collect();
        write_slices(dir.path(), "beta11", &slices).unwrap();
        assert!(slice_path(dir.path(), "beta11", 2).exists());
        assert_eq!(read_slices(dir.path(), "beta11", grid, 3).unwrap(), slices);
    }

    #[test]
    fn malformed_market_is_rejected() {
        let text = "maturity_days,strike,price,implied_vol\n60,abc,1,0.2\n";
        assert!(read_market(text.as_bytes()).is_err());
    }
}
