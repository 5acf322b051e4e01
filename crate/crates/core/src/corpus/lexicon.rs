//! Built-in e-commerce lexicon for synthetic data.
//!
//! Terms are compositions of single-character morphemes with one-word
//! glosses. The *general* morphemes model text a general-domain system has
//! seen; the *domain* morphemes are characters a general tokenizer is
//! missing, so titles built from them exercise the out-of-vocabulary path.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GeneratorSpec, TermPair, WordPair};

pub const GENERAL_MORPHEMES: &[(&str, &str)] = &[
    ("女", "Women"),
    ("男", "Men"),
    ("童", "Kids"),
    ("新", "New"),
    ("长", "Long"),
    ("短", "Short"),
    ("大", "Large"),
    ("小", "Small"),
    ("红", "Red"),
    ("黑", "Black"),
    ("白", "White"),
    ("蓝", "Blue"),
    ("绿", "Green"),
    ("包", "Bag"),
    ("鞋", "Shoes"),
    ("帽", "Hat"),
    ("衣", "Coat"),
    ("裙", "Skirt"),
    ("裤", "Pants"),
    ("杯", "Cup"),
    ("盒", "Box"),
    ("灯", "Lamp"),
    ("椅", "Chair"),
    ("桌", "Table"),
    ("床", "Bed"),
    ("书", "Book"),
    ("笔", "Pen"),
    ("纸", "Paper"),
    ("水", "Water"),
    ("茶", "Tea"),
    ("米", "Rice"),
    ("面", "Noodle"),
    ("花", "Flower"),
    ("车", "Car"),
    ("门", "Door"),
    ("窗", "Window"),
    ("手", "Hand"),
    ("家", "Home"),
    ("软", "Soft"),
    ("厚", "Thick"),
];

/// (character, gloss, category)
pub const DOMAIN_MORPHEMES: &[(&str, &str, &str)] = &[
    ("猫", "Cat", "home furnishings"),
    ("狗", "Dog", "home furnishings"),
    ("鸡", "Chicken", "food"),
    ("鸭", "Duck", "food"),
    ("宠", "Pet", "home furnishings"),
    ("笼", "Cage", "home furnishings"),
    ("栏", "Fence", "home furnishings"),
    ("窝", "Nest", "home furnishings"),
    ("篷", "Tent", "home furnishings"),
    ("袜", "Socks", "clothing"),
    ("毯", "Blanket", "home furnishings"),
    ("枕", "Pillow", "home furnishings"),
    ("锅", "Pot", "home furnishings"),
    ("碗", "Bowl", "home furnishings"),
    ("勺", "Spoon", "home furnishings"),
    ("瓶", "Bottle", "home furnishings"),
    ("罐", "Jar", "food"),
    ("梳", "Comb", "cosmetics"),
    ("镜", "Mirror", "cosmetics"),
    ("伞", "Umbrella", "clothing"),
    ("垫", "Cushion", "maternity"),
    ("壶", "Kettle", "home furnishings"),
    ("篮", "Basket", "home furnishings"),
    ("盆", "Basin", "home furnishings"),
    ("钩", "Hook", "home furnishings"),
    ("刷", "Brush", "cosmetics"),
    ("霜", "Cream", "cosmetics"),
    ("膏", "Paste", "cosmetics"),
    ("奶", "Milk", "maternal and infant"),
    ("婴", "Baby", "maternal and infant"),
];

/// Multi-word trade terms that general systems tend to mistranslate.
pub const TRADE_TERMS: &[(&str, &str, &str)] = &[
    ("一件代发", "One Piece Drop Shipping", "trade"),
    ("厂家批发", "Factory Wholesale", "trade"),
    ("代加工", "Original Equipment Manufacturer", "trade"),
];

pub fn general_fillers() -> Vec<WordPair> {
    GENERAL_MORPHEMES
        .iter()
        .map(|&(s, t)| WordPair::new(s, t))
        .collect()
}

/// All two-morpheme general terms, e.g. ("红杯", "Red Cup").
pub fn general_terms() -> Vec<TermPair> {
    let mut out = Vec::new();
    for &(s1, t1) in GENERAL_MORPHEMES {
        for &(s2, t2) in GENERAL_MORPHEMES {
            if s1 != s2 {
                out.push(TermPair::new(format!("{s1}{s2}"), format!("{t1} {t2}")));
            }
        }
    }
    out
}

/// Up to `count` distinct domain terms: the trade terms first, then a seeded
/// sample of two-morpheme compositions containing at least one domain
/// morpheme.
pub fn domain_terms(count: usize, seed: u64) -> Vec<TermPair> {
    let mut out: Vec<TermPair> = TRADE_TERMS
        .iter()
        .take(count)
        .map(|&(s, t, c)| TermPair::new(s, t).with_category(c))
        .collect();

    let general = GENERAL_MORPHEMES.iter().map(|&(s, t)| (s, t, None));
    let domain = DOMAIN_MORPHEMES.iter().map(|&(s, t, c)| (s, t, Some(c)));
    let all: Vec<(&str, &str, Option<&str>)> = general.chain(domain).collect();
    let mut candidates = Vec::new();
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            if i != j && (a.2.is_some() || b.2.is_some()) {
                candidates.push((a, b));
            }
        }
    }
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut seen: HashSet<String> = out.iter().map(|t| t.source.clone()).collect();
    for (a, b) in candidates {
        if out.len() >= count {
            break;
        }
        let source = format!("{}{}", a.0, b.0);
        if seen.insert(source.clone()) {
            let category = b.2.or(a.2).unwrap_or("general");
            out.push(TermPair::new(source, format!("{} {}", a.1, b.1)).with_category(category));
        }
    }
    out
}

/// Keyword-stacked titles over general vocabulary only.
pub fn general_generator(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        term_lexicon: general_terms(),
        filler_lexicon: general_fillers(),
        stack_length_range: (2, 4),
        seed,
    }
}

/// Keyword-stacked titles mixing domain terms with general fillers.
pub fn domain_generator(terms: &[TermPair], seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        term_lexicon: terms.to_vec(),
        filler_lexicon: general_fillers(),
        stack_length_range: (2, 4),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn morphemes_are_distinct() {
        let mut chars = HashSet::new();
        let mut glosses = HashSet::new();
        for (s, t) in GENERAL_MORPHEMES
            .iter()
            .copied()
            .chain(DOMAIN_MORPHEMES.iter().map(|&(s, t, _)| (s, t)))
        {
            assert_eq!(s.chars().count(), 1);
            assert!(chars.insert(s), "duplicate {s}");
            assert!(glosses.insert(t), "duplicate {t}");
        }
    }

    #[test]
    fn domain_terms_are_distinct_and_seeded() {
        let a = domain_terms(250, 1);
        assert_eq!(a.len(), 250);
        let sources: HashSet<_> = a.iter().map(|t| &t.source).collect();
        assert_eq!(sources.len(), 250);
        assert_eq!(a, domain_terms(250, 1));
        assert_ne!(a, domain_terms(250, 2));
        let domain_chars: HashSet<&str> = DOMAIN_MORPHEMES.iter().map(|m| m.0).collect();
        for t in &a[TRADE_TERMS.len()..] {
            assert!(t
                .source
                .chars()
                .any(|c| domain_chars.contains(c.to_string().as_str())));
        }
    }
}
