pub mod bus;
pub mod coordinator;
pub mod fleet;
pub mod geo;
pub mod geolocator;
pub mod geometry;
pub mod planner;
pub mod scale_model;
pub mod scenario;
pub mod sitemap;
pub mod tasking;
pub mod vehicle_sim;
