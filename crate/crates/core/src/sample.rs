use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// Binary task: is the eye healthy. Index 1 (unhealthy) is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthLabel {
    Healthy,
    Unhealthy,
}

/// Three-way task: before cataract surgery, after it, or neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionLabel {
    PreCataract,
    PostCataract,
    Others,
}

impl HealthLabel {
    pub const NAMES: [&'static str; 2] = ["healthy", "unhealthy"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        [Self::Healthy, Self::Unhealthy].get(i).copied()
    }
}

impl ConditionLabel {
    pub const ALL: [Self; 3] = [Self::PreCataract, Self::PostCataract, Self::Others];
    pub const NAMES: [&'static str; 3] = ["pre_cataract", "post_cataract", "others"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    /// The binary label this condition implies.
    pub fn health(self) -> HealthLabel {
        match self {
            Self::Others => HealthLabel::Healthy,
            Self::PreCataract | Self::PostCataract => HealthLabel::Unhealthy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EyeSample {
    pub image: GrayImage,
    pub mask: Option<Mask>,
    pub label_t1: Option<HealthLabel>,
    pub label_t2: Option<ConditionLabel>,
    pub sample_id: String,
}

impl EyeSample {
    /// Checks mask shape and that the two labels agree.
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.mask {
            let dims = (self.image.width() as usize, self.image.height() as usize);
            if m.dims() != dims {
                return Err(Error::Validation(format!(
                    "{}: mask {:?} does not match image {:?}",
                    self.sample_id,
                    m.dims(),
                    dims
                )));
            }
        }
        if let (Some(t1), Some(t2)) = (self.label_t1, self.label_t2) {
            if t2.health() != t1 {
                return Err(Error::Validation(format!(
                    "{}: label_t2 {} contradicts label_t1 {:?}",
                    self.sample_id,
                    t2.name(),
                    t1
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_consistency() {
        let mut s = EyeSample {
            image: GrayImage::new(4, 4),
            mask: None,
            label_t1: Some(HealthLabel::Healthy),
            label_t2: Some(ConditionLabel::PreCataract),
            sample_id: "x".into(),
        };
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        s.label_t1 = Some(HealthLabel::Unhealthy);
        s.validate().unwrap();
        s.mask = Some(Mask::new(3, 4));
        assert!(s.validate().is_err());
    }

    #[test]
    fn serde_names() {
        assert_eq!(serde_json::to_string(&ConditionLabel::PostCataract).unwrap(), "\"post_cataract\"");
        assert_eq!(serde_json::to_string(&HealthLabel::Unhealthy).unwrap(), "\"unhealthy\"");
    }
}
