//! Cost-model files: one `key = value` per line, `#` comments, unknown
//! keys rejected. Values overlay a base profile.

use pagesim::CostModelParams;

use crate::experiments::BenchError;

pub fn profile(name: &str) -> Result<CostModelParams, BenchError> {
    match name {
        "windows" => Ok(CostModelParams::windows()),
        "linux" => Ok(CostModelParams::linux()),
        other => Err(BenchError::Config(format!(
            "unknown profile '{other}' (expected windows or linux)"
        ))),
    }
}

pub fn apply_cost_file(base: CostModelParams, text: &str) -> Result<CostModelParams, BenchError> {
    let mut params = base;
    let mut surcharge_pages = base.fault_surcharge_above_pages.map(|(p, _)| p);
    let mut surcharge_cycles = base.fault_surcharge_above_pages.map(|(_, c)| c);

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            BenchError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let parse = |v: &str| -> Result<f64, BenchError> {
            v.parse::<f64>()
                .map_err(|_| BenchError::Config(format!("line {}: bad number '{v}'", lineno + 1)))
        };
        match key {
            "fault_cost_cycles" => params.fault_cost_cycles = parse(value)?,
            "tlb_near_refill" => params.tlb_near_refill = parse(value)?,
            "tlb_far_refill" => params.tlb_far_refill = parse(value)?,
            "pte_write_cost" => params.pte_write_cost = parse(value)?,
            "kernel_entry_cost" => params.kernel_entry_cost = parse(value)?,
            "zero_cost_per_page" => params.zero_cost_per_page = parse(value)?,
            "copy_cost_per_byte" => params.copy_cost_per_byte = parse(value)?,
            "byte_access_cost" => params.byte_access_cost = parse(value)?,
            "tlb_flush_cost" => params.tlb_flush_cost = parse(value)?,
            "fault_surcharge_above_pages" => {
                if value == "off" {
                    surcharge_pages = None;
                    surcharge_cycles = None;
                } else {
                    surcharge_pages = Some(parse(value)? as u64);
                }
            }
            "fault_surcharge_cycles" => surcharge_cycles = Some(parse(value)?),
            other => {
                return Err(BenchError::Config(format!(
                    "line {}: unknown cost-model key '{other}'",
                    lineno + 1
                )))
            }
        }
    }

    params.fault_surcharge_above_pages = match (surcharge_pages, surcharge_cycles) {
        (Some(p), Some(c)) => Some((p, c)),
        (None, None) => None,
        _ => {
            return Err(BenchError::Config(
                "fault_surcharge_above_pages and fault_surcharge_cycles must be set together"
                    .into(),
            ))
        }
    };
    Ok(params)
}
