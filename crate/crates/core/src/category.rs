//! The seven single and mixed degradation categories.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{Degradation, LabelVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Rain,
    Snow,
    Haze,
    Noise,
    RainHaze,
    HazeNoise,
    RainHazeNoise,
}

impl Category {
    /// Generation order.
    pub const ALL: [Category; 7] = [
        Category::Rain,
        Category::Snow,
        Category::Haze,
        Category::Noise,
        Category::RainHaze,
        Category::HazeNoise,
        Category::RainHazeNoise,
    ];

    /// Column order of the evaluation table.
    pub const REPORT_ORDER: [Category; 7] = [
        Category::Haze,
        Category::HazeNoise,
        Category::Noise,
        Category::Rain,
        Category::RainHaze,
        Category::RainHazeNoise,
        Category::Snow,
    ];

    /// Directory name, also the serialized form.
    pub fn dir_name(self) -> &'static str {
        match self {
            Category::Rain => "rain",
            Category::Snow => "snow",
            Category::Haze => "haze",
            Category::Noise => "noise",
            Category::RainHaze => "rain_haze",
            Category::HazeNoise => "haze_noise",
            Category::RainHazeNoise => "rain_haze_noise",
        }
    }

    pub fn report_label(self) -> &'static str {
        match self {
            Category::Rain => "rain",
            Category::Snow => "snow",
            Category::Haze => "haze",
            Category::Noise => "noise",
            Category::RainHaze => "r+h",
            Category::HazeNoise => "h+n",
            Category::RainHazeNoise => "r+h+n",
        }
    }

    /// Constituent degradations in application order (rain, haze, noise).
    pub fn types(self) -> &'static [Degradation] {
        use Degradation::*;
        match self {
            Category::Rain => &[Rain],
            Category::Snow => &[Snow],
            Category::Haze => &[Haze],
            Category::Noise => &[Noise],
            Category::RainHaze => &[Rain, Haze],
            Category::HazeNoise => &[Haze, Noise],
            Category::RainHazeNoise => &[Rain, Haze, Noise],
        }
    }

    pub fn labels(self) -> LabelVector {
        LabelVector::from_set(&self.types().iter().copied().collect())
    }

    /// The category whose constituents are exactly `types`, if it exists.
    pub fn from_types(types: &[Degradation]) -> Result<Category> {
        let mut want: Vec<Degradation> = types.to_vec();
        want.sort();
        want.dedup();
        Category::ALL
            .into_iter()
            .find(|c| {
                let mut have = c.types().to_vec();
                have.sort();
                have == want
            })
            .ok_or_else(|| Error::Validation(format!("unsupported degradation combination {types:?}")))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.dir_name() == s || c.report_label() == s)
            .ok_or_else(|| Error::Validation(format!("unknown category {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_order_is_a_permutation() {
        let mut a = Category::REPORT_ORDER.to_vec();
        a.sort();
        assert_eq!(a, Category::ALL.to_vec());
    }

    #[test]
    fn mixed_labels_are_multi_hot() {
        assert_eq!(Category::RainHazeNoise.labels().0, [1, 0, 1, 1]);
        assert_eq!(Category::Snow.labels().0, [0, 1, 0, 0]);
    }

    #[test]
    fn snow_never_mixes() {
        use Degradation::*;
        assert!(Category::from_types(&[Snow, Rain]).is_err());
        assert!(Category::from_types(&[Rain, Noise]).is_err());
        assert_eq!(Category::from_types(&[Haze, Rain]).unwrap(), Category::RainHaze);
    }

    #[test]
    fn parses_both_spellings() {
        for c in Category::ALL {
            assert_eq!(c.dir_name().parse::<Category>().unwrap(), c);
            assert_eq!(c.report_label().parse::<Category>().unwrap(), c);
        }
    }
}
