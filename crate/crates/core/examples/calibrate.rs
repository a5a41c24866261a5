//! Prints the calibration sweep as Markdown.
//!
//! `cargo run -p sbcformer --example calibrate > CALIBRATION.md`

use sbcformer::calibration::{
    calibrate, Candidate, ATTN_RATIO_GRID, CALIBRATED, EXPANSION_GRID, FFN_GRID, HEAD_DIM_GRID, TARGET_GMACS,
    TARGET_NO_LOCAL_M, TARGET_PARAMS_M, TARGET_STD_ATTN_M,
};
use sbcformer::{StemWidths, Variant};

fn row(rank: usize, c: &Candidate) -> String {
    let h = &c.hyper;
    format!(
        "| {rank} | {:?} | {} | {:?} | {} | {:.4} | {} | {} | {:.2} / {:.2} |",
        h.stem,
        h.attn_ratio,
        h.expansion,
        h.ffn_ratio,
        c.objective,
        c.params_m.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>().join(" / "),
        c.gmacs.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>().join(" / "),
        c.no_local_m,
        c.std_attn_m,
    )
}

fn main() {
    let all = calibrate();
    let best = &all[0];
    assert_eq!(best.hyper, CALIBRATED, "CALIBRATED is stale");

    println!("# Calibration\n");
    println!("Generated by `cargo run -p sbcformer --example calibrate`.\n");
    println!("## Grid\n");
    println!("- stem widths: {:?}", StemWidths::ALL);
    println!("- attention projection ratio: {ATTN_RATIO_GRID:?}");
    println!("- InvRes expansion per stage: {EXPANSION_GRID:?} each");
    println!("- FFN ratio: {FFN_GRID:?}");
    println!(
        "- head width: {HEAD_DIM_GRID:?}; it changes no count, so the largest value dividing every attention width is used\n"
    );
    println!("Objective: sum of relative deviations from the ten reference figures");
    println!("(four parameter counts, four MAC counts, two ablated parameter counts).");
    println!("Candidates must keep the ablation ordering full B > no-local > std-attn.");
    println!("{} feasible candidates.\n", all.len());

    println!("## Selected\n");
    println!("`{:?}`\n", best.hyper);
    println!("| variant | params (M) | target | dev | GMACs | target | dev |");
    println!("|---|---|---|---|---|---|---|");
    for (i, v) in Variant::ALL.iter().enumerate() {
        let (p, m) = (best.params_m[i], best.gmacs[i]);
        println!(
            "| {v} | {p:.3} | {} | {:+.1}% | {m:.3} | {} | {:+.1}% |",
            TARGET_PARAMS_M[i],
            100.0 * (p / TARGET_PARAMS_M[i] - 1.0),
            TARGET_GMACS[i],
            100.0 * (m / TARGET_GMACS[i] - 1.0)
        );
    }
    println!(
        "| B no-local | {:.3} | {TARGET_NO_LOCAL_M} | {:+.1}% | | | |",
        best.no_local_m,
        100.0 * (best.no_local_m / TARGET_NO_LOCAL_M - 1.0)
    );
    println!(
        "| B std-attn | {:.3} | {TARGET_STD_ATTN_M} | {:+.1}% | | | |",
        best.std_attn_m,
        100.0 * (best.std_attn_m / TARGET_STD_ATTN_M - 1.0)
    );

    println!("\n## Top 15\n");
    println!("| rank | stem | attn ratio | expansion | ffn | objective | params XS/S/B/L | GMACs XS/S/B/L | B no-local / std-attn |");
    println!("|---|---|---|---|---|---|---|---|---|");
    for (i, c) in all.iter().take(15).enumerate() {
        println!("{}", row(i + 1, c));
    }
}
