//! Trainable-parameter and storage accounting per profile.
//!
//! All quantities are exact integers. `K`/`M` abbreviations (decimal, one
//! truncated decimal place) only appear through [`abbreviate`].

use std::fmt::Write as _;

use crate::codec::profile::MaskMode;

/// Bytes per stored float parameter.
pub const FLOAT_BYTES: u64 = 4;

/// Block count, hidden size and bottleneck of the reference encoder setting.
pub const PAPER_SCALE_L: u64 = 12;
pub const PAPER_SCALE_D: u64 = 768;
pub const PAPER_SCALE_B: u64 = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccountingReport {
    pub mode: MaskMode,
    pub n: u64,
    pub l: u64,
    pub b: u64,
    pub d: u64,
    /// Mask logits for both masks plus the per-block LN affine: `2(N+b)·L`.
    pub trainable_count: u64,
    /// Mask payload only: `2·ceil(N/8)·L` (hard) or `2N·L·4` (soft).
    pub mask_bytes: u64,
    /// LN affine storage, reported separately from the mask payload.
    pub ln_affine_bytes: u64,
    /// Conventional adapter tuning: `2(d·b)·L` parameters.
    pub single_adapter_count: u64,
    pub single_adapter_bytes: u64,
}

pub fn trainable_count(n: u64, l: u64, b: u64) -> u64 {
    2 * (n + b) * l
}

pub fn mask_bytes(mode: MaskMode, n: u64, l: u64) -> u64 {
    match mode {
        MaskMode::Hard => 2 * n.div_ceil(8) * l,
        MaskMode::Soft => 2 * n * l * FLOAT_BYTES,
    }
}

pub fn single_adapter_count(l: u64, b: u64, d: u64) -> u64 {
    2 * (d * b) * l
}

pub fn account(mode: MaskMode, n: u64, l: u64, b: u64, d: u64) -> AccountingReport {
    let single = single_adapter_count(l, b, d);
    AccountingReport {
        mode,
        n,
        l,
        b,
        d,
        trainable_count: trainable_count(n, l, b),
        mask_bytes: mask_bytes(mode, n, l),
        ln_affine_bytes: 2 * l * b * FLOAT_BYTES,
        single_adapter_count: single,
        single_adapter_bytes: single * FLOAT_BYTES,
    }
}

/// Decimal abbreviation truncated to one decimal place: 3552 → `3.5K`,
/// 3538944 → `3.5M`, 312 → `0.3K`.
pub fn abbreviate(value: u64) -> String {
    let (unit, suffix) = if value >= 1_000_000 {
        (1_000_000, "M")
    } else {
        (1_000, "K")
    };
    let tenths = value * 10 / unit;
    format!("{}.{}{}", tenths / 10, tenths % 10, suffix)
}

pub const ACCOUNTING_HEADER: &str = "mode,N,L,b,d,trainable_params,trainable_display,mask_bytes,mask_display,ln_affine_bytes,single_adapter_params,single_adapter_params_display,single_adapter_bytes,single_adapter_bytes_display";

pub fn accounting_csv(reports: &[AccountingReport]) -> String {
    let mut out = String::from(ACCOUNTING_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.mode.as_str(),
            r.n,
            r.l,
            r.b,
            r.d,
            r.trainable_count,
            abbreviate(r.trainable_count),
            r.mask_bytes,
            abbreviate(r.mask_bytes),
            r.ln_affine_bytes,
            r.single_adapter_count,
            abbreviate(r.single_adapter_count),
            r.single_adapter_bytes,
            abbreviate(r.single_adapter_bytes),
        )
        .expect("writing to a String");
    }
    out
}

/// Cumulative storage after `p` profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalingRow {
    pub p: u64,
    pub single_adapter_params: u64,
    pub single_adapter_bytes: u64,
    /// Warm start: the first N profiles each train a full adapter (which
    /// becomes the bank); every later profile stores only masks.
    pub x_peft_params: u64,
    pub x_peft_soft_bytes: u64,
    pub x_peft_hard_bytes: u64,
}

pub fn scaling_table(p_max: u64, n: u64, l: u64, b: u64, d: u64) -> Vec<ScalingRow> {
    let adapter = single_adapter_count(l, b, d);
    let masks = trainable_count(n, l, b);
    (1..=p_max)
        .map(|p| {
            let warm = p.min(n);
            let later = p.saturating_sub(n);
            ScalingRow {
                p,
                single_adapter_params: p * adapter,
                single_adapter_bytes: p * adapter * FLOAT_BYTES,
                x_peft_params: warm * adapter + later * masks,
                x_peft_soft_bytes: warm * adapter * FLOAT_BYTES + later * mask_bytes(MaskMode::Soft, n, l),
                x_peft_hard_bytes: warm * adapter * FLOAT_BYTES + later * mask_bytes(MaskMode::Hard, n, l),
            }
        })
        .collect()
}

pub const SCALING_HEADER: &str =
    "profiles,single_adapter_params,single_adapter_bytes,x_peft_params,x_peft_soft_bytes,x_peft_hard_bytes";

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from(SCALING_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.p,
            r.single_adapter_params,
            r.single_adapter_bytes,
            r.x_peft_params,
            r.x_peft_soft_bytes,
            r.x_peft_hard_bytes
        )
        .expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rows() {
        let hard = account(MaskMode::Hard, 100, 12, 48, 768);
        assert_eq!((hard.trainable_count, hard.mask_bytes), (3552, 312));
        let soft = account(MaskMode::Soft, 400, 12, 48, 768);
        assert_eq!((soft.trainable_count, soft.mask_bytes), (10752, 38400));
        assert_eq!(soft.single_adapter_count, 884_736);
        assert_eq!(soft.single_adapter_bytes, 3_538_944);
    }

    #[test]
    fn abbreviations() {
        assert_eq!(abbreviate(3552), "3.5K");
        assert_eq!(abbreviate(5952), "5.9K");
        assert_eq!(abbreviate(10752), "10.7K");
        assert_eq!(abbreviate(312), "0.3K");
        assert_eq!(abbreviate(884_736), "884.7K");
        assert_eq!(abbreviate(3_538_944), "3.5M");
    }

    #[test]
    fn scaling_at_hundred_profiles() {
        let rows = scaling_table(100, 150, 12, 48, 768);
        assert_eq!(rows[99].single_adapter_params, 88_473_600);
    }

    #[test]
    fn warm_bank_only_at_p_equals_n() {
        let rows = scaling_table(20, 10, 12, 48, 768);
        let bank = 10 * single_adapter_count(12, 48, 768) * FLOAT_BYTES;
        assert_eq!(rows[9].x_peft_hard_bytes, bank);
        assert_eq!(rows[9].x_peft_soft_bytes, bank);
        assert_eq!(rows[10].x_peft_hard_bytes, bank + mask_bytes(MaskMode::Hard, 10, 12));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = accounting_csv(&[account(MaskMode::Hard, 100, 12, 48, 768)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("hard,100,12,48,768,3552,3.5K,312,0.3K,"));
    }
}
