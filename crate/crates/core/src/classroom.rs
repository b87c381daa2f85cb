//! Incrementally maintained derived state of one session: engagement table
//! and per-user profiles.

use std::collections::BTreeMap;

use crate::domain::{ActionEvent, ActionLog, Catalog, UserId};
use crate::engagement::{EngagementTable, EngagementWeights};
use crate::error::{Error, Result};
use crate::profiling::{build_profiles, UserProfile};

#[derive(Debug, Clone)]
pub struct Classroom {
    catalog: Catalog,
    weights: EngagementWeights,
    table: EngagementTable,
    profiles: BTreeMap<UserId, UserProfile>,
}

impl Classroom {
    pub fn new(catalog: Catalog, weights: EngagementWeights) -> Self {
        Self {
            catalog,
            weights,
            table: EngagementTable::default(),
            profiles: BTreeMap::new(),
        }
    }

    pub fn from_log(catalog: Catalog, weights: EngagementWeights, log: &ActionLog) -> Result<Self> {
        let profiles = build_profiles(log, &catalog, &weights)?;
        Ok(Self {
            table: EngagementTable::from_log(log),
            profiles,
            catalog,
            weights,
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn weights(&self) -> &EngagementWeights {
        &self.weights
    }

    pub fn table(&self) -> &EngagementTable {
        &self.table
    }

    pub fn profiles(&self) -> &BTreeMap<UserId, UserProfile> {
        &self.profiles
    }

    pub fn profile(&self, user: &UserId) -> Option<&UserProfile> {
        self.profiles.get(user)
    }

    pub fn add_user(&mut self, user: UserId) {
        self.profiles
            .entry(user.clone())
            .or_insert_with(|| UserProfile::new(user));
    }

    /// Checks that an event can be applied without mutating anything.
    pub fn check(&self, event: &ActionEvent) -> Result<()> {
        if !self.profiles.contains_key(&event.user_id) {
            return Err(Error::UnknownUser(event.user_id.0.clone()));
        }
        if let Some(image) = &event.image_id {
            if !self.catalog.contains(image) {
                return Err(Error::UnknownImage(image.0.clone()));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, event: &ActionEvent) -> Result<()> {
        self.check(event)?;
        let profile = self
            .profiles
            .get_mut(&event.user_id)
            .expect("checked above");
        profile.apply(event, &self.catalog, &self.weights)?;
        self.table.apply(event);
        Ok(())
    }

    /// Replaces the weight table and rebuilds every profile from the log.
    pub fn reweight(&mut self, weights: EngagementWeights, log: &ActionLog) -> Result<()> {
        weights.validate()?;
        let mut profiles = build_profiles(log, &self.catalog, &weights)?;
        for u in self.profiles.keys() {
            profiles
                .entry(u.clone())
                .or_insert_with(|| UserProfile::new(u.clone()));
        }
        self.profiles = profiles;
        self.weights = weights;
        Ok(())
    }
}
