# Deep Researcher
