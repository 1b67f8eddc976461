# r0-desk: regularized reward maximization for few-step generators
