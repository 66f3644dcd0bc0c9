# BP fusion lab: distributed detection with belief propagation under likelihood and message errors
