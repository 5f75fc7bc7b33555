# Adaptive personalized conversational retrieval (apcir)
