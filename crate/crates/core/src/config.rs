pub struct RunConfig;
