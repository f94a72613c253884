use std::collections::HashMap;
use std::sync::{Arc, Mutex, PoisonError};

use nariqa_core::corpus::{ManifestHeader, Resolver, Scenes, TripletRecord};
use nariqa_core::imagecore::encode_png;
use nariqa_core::Image;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Content hashes of the rendered images of one triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletImages {
    pub aligned: String,
    pub reference: String,
    pub candidates: [String; 2],
}

/// Renders triplet images on demand and serves them by SHA-256 of the PNG
/// bytes, so URLs reveal nothing about the distortions.
pub struct ImageStore {
    scenes: Scenes,
    header: ManifestHeader,
    rendered: Mutex<HashMap<String, TripletImages>>,
    blobs: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ImageStore {
    pub fn new(scenes: Scenes, header: ManifestHeader) -> Self {
        Self {
            scenes,
            header,
            rendered: Mutex::new(HashMap::new()),
            blobs: Mutex::new(HashMap::new()),
        }
    }

    fn store(&self, img: &Image) -> Result<String> {
        let png = encode_png(img)?;
        let hash = content_hash(&png);
        self.blobs
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .entry(hash.clone())
            .or_insert_with(|| Arc::new(png));
        Ok(hash)
    }

    pub fn images_for(&self, rec: &TripletRecord) -> Result<TripletImages> {
        if let Some(hit) = self.rendered.lock().unwrap_or_else(PoisonError::into_inner).get(&rec.triplet_id) {
            return Ok(hit.clone());
        }
        let t = Resolver::new(&self.scenes, &self.header).resolve(rec)?;
        let images = TripletImages {
            aligned: self.store(&t.target)?,
            reference: self.store(&t.reference)?,
            candidates: [self.store(&t.pos)?, self.store(&t.neg)?],
        };
        self.rendered
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .insert(rec.triplet_id.clone(), images.clone());
        Ok(images)
    }

    pub fn png(&self, hash: &str) -> Option<Arc<Vec<u8>>> {
        self.blobs.lock().unwrap_or_else(PoisonError::into_inner).get(hash).cloned()
    }
}
