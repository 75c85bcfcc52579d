//! CSV emission for bin statistics. Fixed schema, fixed 6-decimal reals,
//! rows sorted by bin then allocator label, so identical runs produce
//! byte-identical files.

use std::io::Write;

use crate::experiments::BinStats;

pub const CSV_HEADER: &str =
    "bin_log2,allocator,samples,alloc_cycles,free_cycles,traverse_cycles,alloc_cycles_notraverse";

pub fn write_csv<W: Write>(stats: &[BinStats], mut dest: W) -> std::io::Result<()> {
    let mut rows: Vec<&BinStats> = stats.iter().collect();
    rows.sort_by(|a, b| (a.bin_log2, a.allocator).cmp(&(b.bin_log2, b.allocator)));
    writeln!(dest, "{CSV_HEADER}")?;
    for s in rows {
        writeln!(
            dest,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            s.bin_log2,
            s.allocator,
            s.samples,
            s.mean_alloc_cycles,
            s.mean_free_cycles,
            s.mean_traverse_cycles,
            s.mean_alloc_cycles_notraverse,
        )?;
    }
    Ok(())
}

pub fn csv_string(stats: &[BinStats]) -> String {
    let mut buf = Vec::new();
    write_csv(stats, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is ascii")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(bin: u32, allocator: &'static str) -> BinStats {
        BinStats {
            allocator,
            bin_log2: bin,
            samples: 3,
            mean_alloc_cycles: 1.5,
            mean_free_cycles: 0.25,
            mean_traverse_cycles: 2.0,
            mean_alloc_cycles_notraverse: 1.0,
            mean_pages: 1.0,
        }
    }

    #[test]
    fn empty_stats_emit_header_only() {
        assert_eq!(csv_string(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn rows_sort_ascending_by_bin() {
        let out = csv_string(&[stat(20, "umpa"), stat(12, "umpa"), stat(13, "umpa")]);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("12,umpa,3,1.500000,0.250000,2.000000,1.000000"));
        assert!(lines[2].starts_with("13,"));
        assert!(lines[3].starts_with("20,"));
        assert!(out.ends_with('\n'));
    }
}
