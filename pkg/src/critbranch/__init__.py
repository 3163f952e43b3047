"""Critical branching Markov processes: simulation and limit-theorem estimators."""
