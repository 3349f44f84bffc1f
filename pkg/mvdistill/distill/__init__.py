# Distill package
