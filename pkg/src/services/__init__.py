# Services du pipeline : audio, features, augmentation, réseau, évaluation
