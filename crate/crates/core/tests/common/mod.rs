#![allow(dead_code)]

use otcal_core::config::{Config, InstrumentConfig, Problem, StandardReference};
use otcal_core::pricing::generate_market_prices;

pub fn small_config(n: usize) -> Config {
    Config::standard(StandardReference::Good).with_grid(n, n)
}

/// Keeps only the listed `(maturity_days, strike)` calls.
pub fn with_calls(mut cfg: Config, calls: &[(u32, f64)]) -> Config {
    cfg.instruments = calls.iter().map(|&(d, k)| InstrumentConfig { maturity_days: d, strike: k, price: None }).collect();
    cfg
}

/// Problem with generating-model prices installed.
pub fn priced(mut cfg: Config) -> Problem {
    let seed = cfg.to_problem().expect("valid config");
    let prices = generate_market_prices(&seed).expect("market prices");
    for (ic, p) in cfg.instruments.iter_mut().zip(prices) {
        ic.price = Some(p);
    }
    cfg.to_problem().expect("valid config")
}
