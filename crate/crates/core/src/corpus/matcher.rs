//! Target-word matching used for masking and pair labeling.

/// Normalized form used whenever two target words are compared: case-folded,
/// trimmed, with internal whitespace collapsed to single spaces. No stemming;
/// multi-word phrases must match word for word.
pub fn normalize_target(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when `text` utters `target` as a whole-word sequence, ignoring case
/// and punctuation between words. The final word of the target may carry a
/// plural suffix ("s"/"es"), so a guesser answering "planets" wins the word
/// "planet".
pub fn utters_target(text: &str, target: &str) -> bool {
    let target_words: Vec<String> = normalize_target(target)
        .split(' ')
        .map(str::to_string)
        .filter(|w| !w.is_empty())
        .collect();
    if target_words.is_empty() {
        return false;
    }
    let text_words: Vec<String> = words_of(text);
    if text_words.len() < target_words.len() {
        return false;
    }
    let k = target_words.len();
    'outer: for start in 0..=(text_words.len() - k) {
        for (j, want) in target_words.iter().enumerate() {
            let got = &text_words[start + j];
            let last = j == k - 1;
            if !word_matches(got, want, last) {
                continue 'outer;
            }
        }
        return true;
    }
    false
}

fn word_matches(got: &str, want: &str, allow_plural: bool) -> bool {
    if got == want {
        return true;
    }
    if allow_plural {
        if let Some(stem) = got.strip_suffix("es") {
            if stem == want {
                return true;
            }
        }
        if let Some(stem) = got.strip_suffix('s') {
            if stem == want {
                return true;
            }
        }
    }
    false
}

/// Splits text into lowercased alphanumeric words; everything else is a
/// boundary.
fn words_of(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}
