//! Binary labels and image-level attributes shared across the crate.

use serde::{Deserialize, Serialize};

/// The label assigned to an anchor by IoU matching against the available
/// annotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Label::Negative => 0.0,
            Label::Positive => 1.0,
        }
    }

    pub fn as_bit(self) -> u8 {
        self as u8
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl From<bool> for Label {
    fn from(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

/// Image-level attribute. `Abnormal` images contain objects, only some of
/// which are annotated; `Normal` images are guaranteed to contain none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ImageClass {
    #[serde(rename = "AP")]
    Abnormal,
    #[serde(rename = "NP")]
    Normal,
}

impl ImageClass {
    /// The binary attribute `a`: 1 for abnormal images, 0 for normal ones.
    pub fn attribute(self) -> u8 {
        match self {
            ImageClass::Abnormal => 1,
            ImageClass::Normal => 0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ImageClass::Abnormal => "AP",
            ImageClass::Normal => "NP",
        }
    }

    pub fn from_tag(tag: &str) -> Option<ImageClass> {
        match tag {
            "AP" => Some(ImageClass::Abnormal),
            "NP" => Some(ImageClass::Normal),
            _ => None,
        }
    }
}
