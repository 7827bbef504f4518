//! Name-keyed constructors for interchangeable strategies (samplers,
//! baselines, divergences) selected at run time.

use indexmap::IndexMap;

use crate::error::{Error, Result};

type Factory<T, A> = Box<dyn Fn(A) -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    factories: IndexMap<&'static str, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, factories: IndexMap::new() }
    }

    pub fn register(&mut self, name: &'static str, factory: impl Fn(A) -> Box<T> + Send + Sync + 'static) {
        self.factories.insert(name, Box::new(factory));
    }

    /// Registered names in registration order.
    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, arg: A) -> Result<Box<T>> {
        let f = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        Ok(f(arg))
    }
}
