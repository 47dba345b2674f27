use crate::federation::MetricsRow;

pub const LONG_HEADER: &str = "round,client_id,split,metric,value";

/// One line per present metric value, for plotting learning curves.
pub fn to_long_format(rows: &[MetricsRow]) -> String {
    let mut out = String::from(LONG_HEADER);
    out.push('\n');
    for r in rows {
        let metrics: [(&str, Option<f64>); 8] = [
            ("accuracy", r.accuracy),
            ("loss_wce", r.loss_wce),
            ("loss_w", r.loss_w),
            ("loss_p", r.loss_p),
            ("beta_certain_mean", r.beta_certain_mean),
            ("beta_uncertain_mean", r.beta_uncertain_mean),
            ("relabel_count", r.relabel_count.map(|c| c as f64)),
            ("relabel_precision", r.relabel_precision),
        ];
        for (name, value) in metrics {
            if let Some(v) = value {
                out.push_str(&format!("{},{},{},{name},{v}\n", r.round, r.client_id, r.split));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_absent_values() {
        let mut r = MetricsRow::empty(2, -1, "local_test");
        r.accuracy = Some(0.75);
        r.relabel_count = Some(3);
        assert_eq!(
            to_long_format(&[r]),
            "round,client_id,split,metric,value\n2,-1,local_test,accuracy,0.75\n2,-1,local_test,relabel_count,3\n"
        );
    }
}
