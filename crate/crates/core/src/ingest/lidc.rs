use serde::{Deserialize, Serialize};

use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LidcLabel {
    Benign,
    Malignant,
}

/// Binary nodule label from four radiologist malignancy ratings (1..=5):
/// malignant iff the mean rating is strictly above 2.
pub fn derive_lidc_label(ratings: [f64; 4]) -> Result<LidcLabel, IngestError> {
    if let Some(&r) = ratings.iter().find(|r| !(1.0..=5.0).contains(*r)) {
        return Err(IngestError::RatingOutOfRange(r));
    }
    let mean = ratings.iter().sum::<f64>() / 4.0;
    Ok(if mean > 2.0 {
        LidcLabel::Malignant
    } else {
        LidcLabel::Benign
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(derive_lidc_label([1.0, 2.0, 3.0, 3.0]).unwrap(), LidcLabel::Malignant);
        assert_eq!(derive_lidc_label([2.0, 2.0, 2.0, 2.0]).unwrap(), LidcLabel::Benign);
        assert_eq!(derive_lidc_label([1.0, 1.0, 1.0, 1.0]).unwrap(), LidcLabel::Benign);
        assert_eq!(derive_lidc_label([5.0, 5.0, 5.0, 5.0]).unwrap(), LidcLabel::Malignant);
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(
            derive_lidc_label([0.0, 2.0, 2.0, 2.0]),
            Err(IngestError::RatingOutOfRange(r)) if r == 0.0
        ));
        assert!(derive_lidc_label([1.0, 2.0, 6.0, 2.0]).is_err());
        assert!(derive_lidc_label([f64::NAN, 2.0, 2.0, 2.0]).is_err());
    }
}
