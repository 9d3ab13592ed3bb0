use crate::response::PostMessage;

/// Jaro similarity over Unicode scalar values. Two empty strings are
/// identical (1.0); an empty and a non-empty string share nothing (0.0).
pub fn jaro(s: &str, t: &str) -> f64 {
    let s: Vec<char> = s.chars().collect();
    let t: Vec<char> = t.chars().collect();
    if s.is_empty() && t.is_empty() {
        return 1.0;
    }
    if s.is_empty() || t.is_empty() {
        return 0.0;
    }
    let window = (s.len().max(t.len()) / 2).saturating_sub(1);
    let mut s_hit = vec![false; s.len()];
    let mut t_hit = vec![false; t.len()];
    let mut matches = 0usize;
    for (i, &c) in s.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(t.len());
        for j in lo..hi {
            if !t_hit[j] && t[j] == c {
                s_hit[i] = true;
                t_hit[j] = true;
                matches += 1;
                break;
            }
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let s_seq = s.iter().zip(&s_hit).filter(|(_, &h)| h).map(|(c, _)| c);
    let t_seq = t.iter().zip(&t_hit).filter(|(_, &h)| h).map(|(c, _)| c);
    let out_of_order = s_seq.zip(t_seq).filter(|(a, b)| a != b).count();
    let m = matches as f64;
    let transpositions = out_of_order as f64 / 2.0;
    (m / s.len() as f64 + m / t.len() as f64 + (m - transpositions) / m) / 3.0
}

/// Whether two broadcast lists differ in count, origin multiset, or the
/// content of any position-aligned pair (Jaro similarity below `threshold`).
pub fn postmessage_differs(a: &[PostMessage], b: &[PostMessage], threshold: f64) -> bool {
    if a.len() != b.len() {
        return true;
    }
    let mut oa: Vec<&str> = a.iter().map(|m| m.origin.as_str()).collect();
    let mut ob: Vec<&str> = b.iter().map(|m| m.origin.as_str()).collect();
    oa.sort_unstable();
    ob.sort_unstable();
    if oa != ob {
        return true;
    }
    a.iter()
        .zip(b)
        .any(|(x, y)| jaro(&x.data, &y.data) < threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(o: &str, d: &str) -> PostMessage {
        PostMessage {
            origin: o.into(),
            data: d.into(),
        }
    }

    #[test]
    fn textbook_values() {
        assert!((jaro("MARTHA", "MARHTA") - 0.944_444_444_444_444_5).abs() < 1e-12);
        assert!((jaro("DIXON", "DICKSONX") - 0.766_666_666_666_666_7).abs() < 1e-12);
        assert!((jaro("JELLYFISH", "SMELLYFISH") - 0.896_296_296_296_296_3).abs() < 1e-12);
        assert_eq!(jaro("abc", "xyz"), 0.0);
        assert_eq!(jaro("", ""), 1.0);
        assert_eq!(jaro("a", ""), 0.0);
    }

    #[test]
    fn postmessage_cases() {
        let o = "https://conf.test";
        assert!(postmessage_differs(&[], &[msg(o, "hi")], 0.9));
        let same = [msg(o, "ready:user=alice")];
        assert!(!postmessage_differs(&same, &same, 0.9));
        let close = [msg(o, "ready:user=alice2")];
        assert!(jaro("ready:user=alice", "ready:user=alice2") >= 0.9);
        assert!(!postmessage_differs(&same, &close, 0.9));
        assert!(postmessage_differs(
            &same,
            &[msg("https://other.test", "ready:user=alice")],
            0.9
        ));
        assert!(postmessage_differs(&same, &[msg(o, "error")], 0.9));
    }
}
